//! Generate a synthetic speaker archive, save it in both formats and reload.
//!
//! cargo run --example synth_archive -- [out_dir]

use nplda::dataio::{load_archive, write_archive, write_text_archive};
use nplda::synth::{generate, SynthSpec};

fn main() -> nplda::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let spec = SynthSpec::parse(
        "dim = 8\n\
         rank = 3\n\
         speakers = 20\n\
         segments_per_speaker = 4\n\
         phi_spectrum = 2.0, 1.0, 0.5\n\
         sigma_diag = 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9\n\
         sigma_rotation_seed = 3\n\
         seed = 11\n",
    )?;
    let archive = generate(&spec)?;
    println!(
        "{} records of dimension {}",
        archive.len(),
        archive.dimension()
    );
    for rec in archive.records().iter().take(3) {
        println!(
            "  {} speaker={:?} gender={} |x|={:.3}",
            rec.segment_id,
            rec.speaker_id,
            rec.gender,
            rec.vector.norm()
        );
    }

    let bin = out.join("synth.emb");
    let txt = out.join("synth.txt");
    write_archive(&archive, &bin)?;
    write_text_archive(&archive, &txt)?;
    assert_eq!(load_archive(&bin)?, archive);
    assert_eq!(load_archive(&txt)?, archive);
    println!("wrote {} and {}", bin.display(), txt.display());
    Ok(())
}
