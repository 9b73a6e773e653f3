//! Deterministic summary of an artifact directory.

use std::path::Path;

use super::store::{ArtifactStore, Manifest};
use super::HarnessError;

pub const REPORT_STAGE: &str = "report";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

fn strip_header(text: &str) -> impl Iterator<Item = &str> {
    text.lines().skip(1).filter(|l| !l.is_empty())
}

/// Writes `report/` with the latent scatter, per-segment speeds, loss curves,
/// evaluation metrics and an index of every stored artifact.
pub fn write_report(root: &Path) -> Result<ReportSummary, HarnessError> {
    let store = ArtifactStore::new(root);
    let stages: Vec<String> = store.stages().into_iter().filter(|s| s != REPORT_STAGE).collect();
    if stages.is_empty() {
        return Err(HarnessError::NoArtifacts(root.to_path_buf()));
    }
    let mut warnings = Vec::new();
    let mut verified: Vec<(String, Manifest)> = Vec::new();
    for s in &stages {
        match store.verify(s) {
            Ok(m) => verified.push((s.clone(), m)),
            Err(e) => warnings.push(format!("skipping {s}: {e}")),
        }
    }
    let find = |name: &str| verified.iter().find(|(s, _)| s == name).map(|(_, m)| m);
    let read = |stage: &str, file: &str, warnings: &mut Vec<String>| -> Option<String> {
        let m = find(stage)?;
        match store.read_text(stage, m, file) {
            Ok(t) => Some(t),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        }
    };

    let latent = match read("rollouts", "latents.csv", &mut warnings) {
        Some(t) => t,
        None => {
            warnings.push("no latent dump (rollouts stage missing)".into());
            String::from("episode,step,z1,z2,speed\n")
        }
    };

    let mut speeds = String::from("track_seed,segment_index,target_speed_mps\n");
    let adapt_stages: Vec<&String> = stages.iter().filter(|s| s.starts_with("adapt_")).collect();
    if adapt_stages.is_empty() {
        warnings.push("no speed model (adaptation stage missing)".into());
    }
    for s in &adapt_stages {
        let seed = s.trim_start_matches("adapt_");
        if let Some(t) = read(s, "speed_model.csv", &mut warnings) {
            for line in strip_header(&t) {
                speeds.push_str(&format!("{seed},{line}\n"));
            }
        }
    }

    let mut losses = String::from("model,epoch,loss\n");
    for (stage, file) in [("segmenter", "segmenter_loss.csv"), ("vae", "vae_loss.csv")] {
        match read(stage, file, &mut warnings) {
            Some(t) => {
                for line in strip_header(&t) {
                    losses.push_str(&format!("{stage},{line}\n"));
                }
            }
            None => warnings.push(format!("no loss curve for {stage}")),
        }
    }

    let mut metrics = String::from("evaluation,success_rate,avg_speed_kmh,off_road_events,laps_completed,episodes\n");
    let mut table = String::new();
    let evals: Vec<&String> = stages.iter().filter(|s| s.starts_with("eval_")).collect();
    if evals.is_empty() {
        warnings.push("no evaluation metrics".into());
    }
    for s in &evals {
        if let Some(t) = read(s, "metrics.csv", &mut warnings) {
            for line in strip_header(&t) {
                metrics.push_str(&format!("{s},{line}\n"));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 5 {
                    table.push_str(&format!(
                        "  {s:<48} success {:>5}  speed {:>9} km/h  off-road {:>3}  laps {:>4}\n",
                        f[0], f[1], f[2], f[3]
                    ));
                }
            }
        }
    }

    let mut index = String::from("Artifacts\n");
    for (s, m) in &verified {
        for (name, sum) in &m.files {
            index.push_str(&format!("  {s}/{name} {sum}\n"));
        }
    }
    index.push_str("\nMetrics\n");
    index.push_str(if table.is_empty() { "  none\n" } else { &table });
    index.push_str("\nWarnings\n");
    if warnings.is_empty() {
        index.push_str("  none\n");
    }
    for w in &warnings {
        index.push_str(&format!("  {w}\n"));
    }

    let files = vec![
        ("latent_scatter.csv".to_string(), latent.into_bytes()),
        ("speed_segments.csv".to_string(), speeds.into_bytes()),
        ("loss_curves.csv".to_string(), losses.into_bytes()),
        ("metrics.csv".to_string(), metrics.into_bytes()),
        ("report.txt".to_string(), index.into_bytes()),
    ];
    store.commit(REPORT_STAGE, "report", &files)?;
    Ok(ReportSummary {
        files: files.into_iter().map(|(n, _)| n).collect(),
        warnings,
    })
}
