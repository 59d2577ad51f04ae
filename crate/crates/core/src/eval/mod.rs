//! Per-domain evaluation reports, PGM dumps and training-view inspection.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

pub use metrics::{
    boundary, directed_surface_distances, nearest_rank, overlap_metrics, squared_distance_transform,
    surface_metrics, Hd95Mode, MaskRef,
};

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Sample, Split};
use crate::tensor::Tensor;
use crate::trainer::{infer, prepare_pair, Model, TrainConfig, TrainState};

/// Dice, Jaccard, 95th-percentile Hausdorff and average surface distance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl Scores {
    fn mean(items: &[Scores]) -> Scores {
        let n = items.len().max(1) as f64;
        let mut s = Scores::default();
        for i in items {
            s.dice += i.dice;
            s.jaccard += i.jaccard;
            s.hd95 += i.hd95;
            s.asd += i.asd;
        }
        Scores {
            dice: s.dice / n,
            jaccard: s.jaccard / n,
            hd95: s.hd95 / n,
            asd: s.asd / n,
        }
    }
}

/// Scores of foreground class `class` in one prediction.
pub fn class_scores(pred: &Tensor<u8>, gt: &Tensor<u8>, class: u8, mode: Hd95Mode) -> Result<Scores> {
    let (h, w) = gt.hw()?;
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "class_scores",
            format!("prediction {:?} vs reference {:?}", pred.shape(), gt.shape()),
        ));
    }
    let p: Vec<bool> = pred.data().iter().map(|&v| v == class).collect();
    let g: Vec<bool> = gt.data().iter().map(|&v| v == class).collect();
    let (pm, gm) = (MaskRef::new(&p, h, w)?, MaskRef::new(&g, h, w)?);
    let (dice, jaccard) = overlap_metrics(pm, gm)?;
    let (hd95, asd) = surface_metrics(pm, gm, mode)?;
    Ok(Scores {
        dice,
        jaccard,
        hd95,
        asd,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub domain: u32,
    pub class: u8,
    pub scores: Scores,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainRow {
    pub domain: u32,
    /// Mean over foreground classes.
    pub scores: Scores,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<ClassRow>,
    pub domains: Vec<DomainRow>,
    /// Mean over `domains`.
    pub average: Scores,
    pub n: usize,
    /// Domains present in the dataset without test samples.
    pub missing: Vec<u32>,
    pub fingerprint: u64,
}

pub const REPORT_HEADER: &str = "domain,class,dice,jaccard,hd95,asd,n";

impl MetricReport {
    /// Per-class rows, then per-domain rows with class `mean`, then the
    /// overall row with domain `mean`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        let mut row = |d: &str, c: &str, x: &Scores, n: usize| {
            let _ = writeln!(s, "{d},{c},{},{},{},{},{n}", x.dice, x.jaccard, x.hd95, x.asd);
        };
        for r in &self.classes {
            row(&r.domain.to_string(), &r.class.to_string(), &r.scores, r.n);
        }
        for r in &self.domains {
            row(&r.domain.to_string(), "mean", &r.scores, r.n);
        }
        row("mean", "mean", &self.average, self.n);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("config fingerprint {:016x}\n", self.fingerprint);
        let _ = writeln!(s, "{:<8}{:>6}{:>9}{:>9}{:>9}{:>9}", "domain", "n", "dice", "jaccard", "hd95", "asd");
        let mut line = |d: &str, n: usize, x: &Scores| {
            let _ = writeln!(
                s,
                "{d:<8}{n:>6}{:>9.4}{:>9.4}{:>9.3}{:>9.3}",
                x.dice, x.jaccard, x.hd95, x.asd
            );
        };
        for r in &self.domains {
            line(&r.domain.to_string(), r.n, &r.scores);
        }
        line("average", self.n, &self.average);
        for d in &self.missing {
            let _ = writeln!(s, "{d:<8} missing (no test samples)");
        }
        s
    }
}

/// Scores every test sample of `ds` with `predict` and aggregates per class,
/// per domain and across domains.
pub fn evaluate_with(
    ds: &Dataset,
    classes: usize,
    mode: Hd95Mode,
    fingerprint: u64,
    mut predict: impl FnMut(&Sample) -> Result<Tensor<u8>>,
) -> Result<MetricReport> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    let mut per: BTreeMap<u32, Vec<Vec<Scores>>> = BTreeMap::new();
    for e in ds.select(Split::Test, None) {
        let s = ds.load(e)?;
        let pred = predict(&s)?;
        let row = (1..classes)
            .map(|c| class_scores(&pred, &s.mask, c as u8, mode))
            .collect::<Result<Vec<_>>>()?;
        per.entry(e.domain).or_default().push(row);
    }
    let missing: Vec<u32> = ds.domains().into_iter().filter(|d| !per.contains_key(d)).collect();
    for d in &missing {
        warn!("domain {d} has no test samples; excluded from the average");
    }
    let mut report = MetricReport {
        classes: Vec::new(),
        domains: Vec::new(),
        average: Scores::default(),
        n: 0,
        missing,
        fingerprint,
    };
    for (&domain, samples) in &per {
        let n = samples.len();
        let mut class_means = Vec::new();
        for c in 1..classes {
            let col: Vec<Scores> = samples.iter().map(|r| r[c - 1]).collect();
            let scores = Scores::mean(&col);
            class_means.push(scores);
            report.classes.push(ClassRow {
                domain,
                class: c as u8,
                scores,
                n,
            });
        }
        report.domains.push(DomainRow {
            domain,
            scores: Scores::mean(&class_means),
            n,
        });
        report.n += n;
    }
    if report.domains.is_empty() {
        return Err(Error::Contract("dataset has no test samples".into()));
    }
    let ds_scores: Vec<Scores> = report.domains.iter().map(|r| r.scores).collect();
    report.average = Scores::mean(&ds_scores);
    Ok(report)
}

/// Evaluates the student's linear head on the test split.
pub fn evaluate(model: &Model<f32>, cfg: &TrainConfig, ds: &Dataset, mode: Hd95Mode) -> Result<MetricReport> {
    evaluate_with(ds, cfg.classes, mode, cfg.fingerprint(), |s| infer(model, &s.image))
}

/// Writes an 8-bit binary PGM, min-max normalised; a constant plane is black.
pub fn write_pgm(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim("write_pgm", format!("{} values for {h}×{w}", values.len())));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if span > 0.0 && span.is_finite() {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Channel 0 of a `C×H×W` tensor, or a whole 2-D tensor.
fn first_plane(t: &Tensor<f32>) -> Result<(&[f32], usize, usize)> {
    let (h, w) = match t.rank() {
        2 => t.hw()?,
        _ => {
            let (_, h, w) = t.chw()?;
            (h, w)
        }
    };
    Ok((&t.data()[..h * w], h, w))
}

/// Runs the teacher-side preparation of training iteration `t` on one pair
/// and dumps every intermediate image as PGM into `out_dir`.
pub fn inspect_pair(
    state: &TrainState,
    cfg: &TrainConfig,
    labeled: &Sample,
    unlabeled: &Sample,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rng = TrainState::step_rng(cfg, state.t).split(0);
    let (pair, views) = prepare_pair(&state.teacher, labeled, unlabeled, cfg, state.t, &rng)?;
    let mut planes: Vec<(String, Tensor<f32>)> = vec![
        ("x_weak".into(), views.x_weak.clone()),
        ("x_label".into(), labels_as_f32(&views.y_weak)),
        ("u_weak".into(), views.u_weak.clone()),
        ("u_strong".into(), views.u_strong.clone()),
        ("x_virtual".into(), views.x_virtual.clone()),
        ("u_virtual".into(), views.u_virtual.clone()),
        ("x_progressive".into(), views.x_progressive.clone()),
        ("mask1".into(), views.m1.values.clone()),
        ("mask2".into(), views.m2.values.clone()),
    ];
    if let Some(s) = &views.synthesis {
        planes.push(("x_from_u".into(), s.x_from_u.values.clone()));
        planes.push(("u_from_x".into(), s.u_from_x.values.clone()));
        planes.push(("corr_xu".into(), s.corr.onto_unlabeled.clone()));
        planes.push(("corr_ux".into(), s.corr.onto_labeled.clone()));
    }
    if views.pseudo_probs.values.shape()[0] > 1 {
        let (c, h, w) = views.pseudo_probs.values.chw()?;
        let fg: Vec<f32> = (0..h * w)
            .map(|i| (1..c).map(|k| views.pseudo_probs.values.data()[k * h * w + i]).sum())
            .collect();
        planes.push(("pseudo_foreground".into(), Tensor::from_vec([h, w], fg)?));
    }
    for (name, img) in ["in1", "out1", "in2", "out2"].iter().zip(pair.images.iter()) {
        planes.push(((*name).into(), img.clone()));
    }
    let mut written = Vec::new();
    for (name, t) in planes {
        let (data, h, w) = first_plane(&t)?;
        let p = out_dir.join(format!("{name}.pgm"));
        write_pgm(&p, data, h, w)?;
        written.push(p);
    }
    Ok(written)
}

fn labels_as_f32(t: &Tensor<u8>) -> Tensor<f32> {
    Tensor::from_fn(t.shape().to_vec(), |i| f32::from(t.data()[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 1.0], 2, 2).unwrap();
        let b = fs::read(&p).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 255]);
        write_pgm(&p, &[3.0; 4], 2, 2).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[11..], &[0, 0, 0, 0]);
        assert!(write_pgm(&p, &[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn class_scores_of_identity() {
        let gt = Tensor::from_fn([8, 8], |i| u8::from(i % 8 > 3 && i / 8 > 2));
        let s = class_scores(&gt, &gt, 1, Hd95Mode::Directed).unwrap();
        assert_eq!(s, Scores { dice: 1.0, jaccard: 1.0, hd95: 0.0, asd: 0.0 });
    }
}
