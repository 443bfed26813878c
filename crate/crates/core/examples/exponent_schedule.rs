//! Exponent schedules for the grouped induction.
//!
//! Given group sizes (k_1, ..., k_l) summing to at most n - 1, the schedule
//! 1/m_s = (l + 1 - s) k_{s+1} ... k_l eps must satisfy three telescoping
//! sum identities, keep every m_s above 2, and keep the first-step epsilon
//! below 1 - eps.  The example prints one schedule in full and then
//! validates every ordered composition for n up to 5 at both the endpoint
//! and the midpoint choice of eps.

use pompeiu::analysis::{
    exponent_schedule, schedule_eps_endpoint, schedule_eps_midpoint, validate_all_schedules,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 4;
    let groups = [1usize, 2];
    let eps = schedule_eps_endpoint(n);
    let sched = exponent_schedule(&groups, n, eps)?;
    println!("n = {n}, groups = {groups:?}, eps = {eps:.6e}");
    println!(
        "{:>3} {:>5} {:>12} {:>12}  {:>10} {:>10} {:>10}",
        "s", "k_s", "m_s", "eps_s", "sum 1", "sum 2", "sum 3"
    );
    for row in &sched.rows {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        println!(
            "{:>3} {:>5} {:>12.4} {:>12.6e}  {:>10} {:>10} {:>10}",
            row.s,
            row.k_s,
            row.m_s,
            row.eps_s,
            fmt(row.sum_one),
            fmt(row.sum_two),
            fmt(row.sum_three)
        );
    }
    sched.validate()?;
    println!("schedule validates (every m_s > 2, every sum within its window)\n");

    for n in 2..=5 {
        let count = validate_all_schedules(n)?;
        println!(
            "n = {n}: {count} schedules validated (endpoint eps {:.3e}, midpoint {:.3e})",
            schedule_eps_endpoint(n),
            schedule_eps_midpoint(n)
        );
    }
    Ok(())
}
