//! The three structured masking strategies side by side, and the
//! mid-training curriculum that ramps their rates.

use maskdiff::cli::{corrupt_demo, CorruptFlags};
use maskdiff::masking::CurriculumTable;
use maskdiff::Vocabulary;

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::new("abcdefghijklmnopqrstuvwxyz ")?;
    let text = "the quick brown fox";
    let cases = [
        ("plain", CorruptFlags::default()),
        ("s1 unmaskable prefix", CorruptFlags { s1: true, ..Default::default() }),
        ("s2 truncated suffix", CorruptFlags { s2: true, ..Default::default() }),
        ("s3 blocks of 4", CorruptFlags { s3: Some(4), ..Default::default() }),
        ("s1 + s3", CorruptFlags { s1: true, s2: false, s3: Some(2) }),
    ];
    println!("[x] protected, # mask, . pad\n");
    for (name, flags) in cases {
        let view = corrupt_demo(text, 0.5, &flags, 7, &vocab)?;
        println!("{name}\n{}\n", view.render());
    }

    println!("curriculum   s1     s2     s3");
    for row in CurriculumTable::default().rows() {
        println!("epoch {}    {:.2}   {:.2}   {:.2}", row.epoch, row.s1, row.s2, row.s3);
    }
    Ok(())
}
