//! Score hand-made predictions and print the comparison table.

use personadb::eval::metrics::{alignment_and_mse, micro_macro_f1, pearson, spearman};
use personadb::eval::{evaluate, render_table};
use personadb::infer::{Label, ParseStatus, Polarity, Prediction, QueryTask, TaskKind};

fn task(id: &str, intensity: u8, polarity: Polarity) -> QueryTask {
    QueryTask {
        task_id: id.into(),
        user_id: "u1".into(),
        kind: TaskKind::ResponseForecast,
        stimulus: "headline".into(),
        options: vec![],
        gold: Some(Label::forecast(intensity, polarity)),
        split: None,
    }
}

fn pred(id: &str, intensity: u8, polarity: Polarity) -> Prediction {
    Prediction {
        task_id: id.into(),
        user_id: "u1".into(),
        label: Label::forecast(intensity, polarity),
        raw_output: String::new(),
        parse_status: ParseStatus::Clean,
    }
}

fn main() -> personadb::Result<()> {
    println!("pearson  {:.4}", pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.])?);
    println!("spearman {:.4}", spearman(&[1., 2., 3.], &[3., 1., 2.])?);
    let (micro, macro_f1) = micro_macro_f1(&["A"; 6], &["A", "A", "B", "B", "C", "C"])?;
    println!("micro-F1 {micro:.4}  macro-F1 {macro_f1:.4}");
    let (align, mse) = alignment_and_mse(&[0, 3], &[1, 1])?;
    println!("alignment {align:.4}  mse {mse:.4}\n");

    let tasks = [
        task("t1", 0, Polarity::Neutral),
        task("t2", 2, Polarity::Negative),
        task("t3", 3, Polarity::Positive),
        task("t4", 1, Polarity::Positive),
    ];
    let refs: Vec<&QueryTask> = tasks.iter().collect();
    let good = [
        pred("t1", 0, Polarity::Neutral),
        pred("t2", 2, Polarity::Negative),
        pred("t3", 2, Polarity::Positive),
        pred("t4", 1, Polarity::Positive),
    ];
    let flat: Vec<Prediction> = tasks.iter().map(|t| pred(&t.task_id, 1, Polarity::Positive)).collect();
    let rows = vec![
        ("close".to_string(), evaluate(&refs, &good)),
        ("constant".to_string(), evaluate(&refs, &flat)),
    ];
    print!("{}", render_table(&rows));
    for note in &rows[1].1.notes {
        println!("constant: {note}");
    }
    Ok(())
}
