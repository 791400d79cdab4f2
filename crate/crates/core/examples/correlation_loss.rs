//! Correlation distillation between a 6-wide teacher layer and a 3-wide
//! student layer: the loss is zero for copied columns and unchanged by column
//! scaling.

use flexkd::attribution::SelectionSet;
use flexkd::autograd::Tape;
use flexkd::losses::{cross_correlation, flex_kd_loss};
use flexkd::Tensor;

fn loss(teacher: &Tensor, student: &Tensor, sel: &SelectionSet) -> flexkd::Result<f64> {
    let mut tape = Tape::new();
    let s = tape.param(student.clone())?;
    let l = flex_kd_loss(&mut tape, teacher, s, sel, false)?;
    Ok(tape.value(l).item())
}

fn main() -> flexkd::Result<()> {
    let n = 5;
    let teacher = Tensor::new(
        vec![n, 6],
        (0..n * 6).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
    )?;
    let sel = SelectionSet {
        indices: vec![4, 0, 2],
    };

    let copied = teacher.select_columns(&sel.indices)?;
    println!("copied columns:   {:.3e}", loss(&teacher, &copied, &sel)?);

    let mut scaled = copied.clone();
    scaled.data_mut().iter_mut().for_each(|v| *v *= 40.0);
    println!("scaled by 40:     {:.3e}", loss(&teacher, &scaled, &sel)?);

    let mut negated = copied.clone();
    negated.data_mut().iter_mut().for_each(|v| *v = -*v);
    println!("negated columns:  {:.3}", loss(&teacher, &negated, &sel)?);

    let other = Tensor::new(vec![n, 3], (0..n * 3).map(|i| (i as f64).sin()).collect())?;
    println!("unrelated:        {:.3}", loss(&teacher, &other, &sel)?);
    for (m, &j) in sel.indices.iter().enumerate() {
        let c = cross_correlation(&teacher.column(j), &other.column(m))?;
        println!("  C[{m}] (teacher unit {j}) = {:+.4}", c.value);
    }
    Ok(())
}
