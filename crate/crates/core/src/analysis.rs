//! Parameter-manifold export and generate-once timing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{DiscError, Result};
use crate::lang::{cosine, Lexicon, Split, Task};
use crate::model::Model;
use crate::train::Embeddings;

/// Generated policies of a task set, compared pairwise.
#[derive(Clone, Debug, Serialize)]
pub struct ManifoldReport {
    pub tasks: Vec<Task>,
    pub cosine: Vec<Vec<f64>>,
    /// First two principal-component coordinates per task.
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance on each of the two components.
    pub explained: [f64; 2],
}

impl ManifoldReport {
    fn pair_mean(&self, keep: impl Fn(Task, Task) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, &a) in self.tasks.iter().enumerate() {
            for (j, &b) in self.tasks.iter().enumerate().skip(i + 1) {
                if keep(a, b) {
                    sum += self.cosine[i][j];
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Mean cosine over distinct task pairs that share the object.
    pub fn same_object_mean(&self) -> f64 {
        self.pair_mean(|a, b| a.object == b.object)
    }

    /// Mean cosine over pairs sharing neither object nor container.
    pub fn unrelated_mean(&self) -> f64 {
        self.pair_mean(|a, b| a.object != b.object && a.container != b.container)
    }

    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# {provenance}")?;
        writeln!(f, "# explained_variance={},{}", self.explained[0], self.explained[1])?;
        write!(f, "object,container,pc1,pc2")?;
        for t in &self.tasks {
            write!(f, ",cos_{}_{}", t.object, t.container)?;
        }
        writeln!(f)?;
        for ((t, c), row) in self.tasks.iter().zip(&self.coords).zip(&self.cosine) {
            write!(f, "{},{},{},{}", t.object, t.container, c[0], c[1])?;
            for v in row {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        Ok(f.flush()?)
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let labels: Vec<String> = self.tasks.iter().map(|t| format!("o{} c{}", t.object, t.container)).collect();
        let groups: Vec<usize> = self.tasks.iter().map(|t| t.object).collect();
        Ok(std::fs::write(path, svg::scatter(&self.coords, &labels, &groups, "generated policy parameters (PCA)"))?)
    }
}

/// Generates one policy per task (training surface 0), then the pairwise
/// cosine matrix and a PCA projection of the flattened parameters.
pub fn manifold_export(model: &Model, lex: &Lexicon, tasks: &[Task]) -> Result<ManifoldReport> {
    if !model.kind().is_generator() {
        return Err(DiscError::Config(format!("{} does not generate policy parameters", model.kind())));
    }
    let emb = Embeddings::new(lex, Split::Train);
    let mut thetas = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let theta = model.generate(&emb.get(t, 0)?)?.expect("generator kind");
        thetas.push(theta.flat);
    }
    let n = thetas.len();
    let mut cos = vec![vec![0.0; n]; n];
    for i in 0..n {
        cos[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&thetas[i], &thetas[j]);
            cos[i][j] = c;
            cos[j][i] = c;
        }
    }
    let (coords, explained) = pca2(&thetas);
    Ok(ManifoldReport { tasks: tasks.to_vec(), cosine: cos, coords, explained })
}

const POWER_ITERS: usize = 500;

/// Top-two principal coordinates through the centred Gram matrix, which is
/// only `n x n` for `n` samples. Signs are fixed so the largest-magnitude
/// coordinate of each component is positive.
pub fn pca2(xs: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = xs.len();
    if n == 0 {
        return (Vec::new(), [0.0; 2]);
    }
    let dim = xs[0].len();
    let mean: Vec<f64> = (0..dim).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let total: f64 = (0..n).map(|i| gram[i][i]).sum();
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    for c in 0..2 {
        let mut u: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let w: Vec<f64> = gram.iter().map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                lambda = 0.0;
                break;
            }
            lambda = norm;
            u = w.into_iter().map(|v| v / norm).collect();
        }
        let pivot = u.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        let scale = lambda.max(0.0).sqrt();
        for i in 0..n {
            coords[i][c] = u[i] * scale;
        }
        explained[c] = if total > 0.0 { lambda / total } else { 0.0 };
        // deflate
        for i in 0..n {
            for j in 0..n {
                gram[i][j] -= lambda * u[i] * u[j];
            }
        }
    }
    (coords, explained)
}

/// Wall-clock statistics of one operation, per call.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CallStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Calls per timed sample, raised until a sample spans [`MIN_SAMPLE`].
    pub batch: usize,
}

/// Shortest timed sample; faster calls are batched and divided.
pub const MIN_SAMPLE: std::time::Duration = std::time::Duration::from_micros(50);
pub const WARMUP_CALLS: usize = 100;

/// Times `f` over `trials` samples after [`WARMUP_CALLS`] discarded calls.
pub fn time_calls(trials: usize, mut f: impl FnMut()) -> CallStats {
    for _ in 0..WARMUP_CALLS {
        f();
    }
    let mut batch = 1;
    loop {
        let t = Instant::now();
        for _ in 0..batch {
            f();
        }
        if t.elapsed() >= MIN_SAMPLE || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let mut samples: Vec<f64> = (0..trials.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..batch {
                f();
            }
            t.elapsed().as_secs_f64() * 1e3 / batch as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    CallStats { median_ms: at(0.5), p95_ms: at(0.95), batch }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TimingReport {
    pub weight_gen: CallStats,
    pub target_step: CallStats,
    /// One entangled-baseline step: the language pathway is part of every
    /// forward pass, so it is rebuilt per call.
    pub baseline_step: CallStats,
}

impl TimingReport {
    pub fn gen_to_step_ratio(&self) -> f64 {
        self.weight_gen.median_ms / self.target_step.median_ms
    }

    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# {provenance}")?;
        writeln!(f, "operation,median_ms,p95_ms,batch")?;
        for (name, s) in [("weight_gen", self.weight_gen), ("target_step", self.target_step), ("baseline_step", self.baseline_step)] {
            writeln!(f, "{name},{},{},{}", s.median_ms, s.p95_ms, s.batch)?;
        }
        Ok(f.flush()?)
    }
}

/// Generation, generated-policy step and baseline step costs for one
/// instruction of `task`.
pub fn timing_bench(generator: &Model, baseline: &Model, lex: &Lexicon, task: Task, obs: &[f64], trials: usize) -> Result<TimingReport> {
    if !generator.kind().is_generator() || baseline.kind().is_generator() {
        return Err(DiscError::Config("timing needs a generator and an entangled baseline".into()));
    }
    let emb = Embeddings::new(lex, Split::Train).get(task, 0)?;
    let theta = generator.generate(&emb)?.expect("generator kind");
    let mut sink = 0.0;
    let weight_gen = time_calls(trials, || sink += generator.generate(&emb).expect("generation succeeded once").map_or(0.0, |t| t.flat[0]));
    let target_step = time_calls(trials, || sink += theta.act(obs)[0]);
    let baseline_step = time_calls(trials, || sink += baseline.controller(&emb).expect("controller succeeded once").act(obs)[0]);
    std::hint::black_box(sink);
    Ok(TimingReport { weight_gen, target_step, baseline_step })
}

/// Minimal SVG emitters for scatter and line plots.
pub mod svg {
    use std::fmt::Write;

    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    fn bounds(points: impl Iterator<Item = [f64; 2]>) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for [x, y] in points {
            b = [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)];
        }
        if !b[0].is_finite() {
            return [0.0, 1.0, 0.0, 1.0];
        }
        if b[1] - b[0] < 1e-12 {
            b[1] = b[0] + 1.0;
        }
        if b[3] - b[2] < 1e-12 {
            b[3] = b[2] + 1.0;
        }
        b
    }

    fn project(b: &[f64; 4], [x, y]: [f64; 2]) -> (f64, f64) {
        (PAD + (x - b[0]) / (b[1] - b[0]) * (W - 2.0 * PAD), H - PAD - (y - b[2]) / (b[3] - b[2]) * (H - 2.0 * PAD))
    }

    fn frame(title: &str) -> String {
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
        let _ = writeln!(
            s,
            "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        s
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    pub fn scatter(points: &[[f64; 2]], labels: &[String], groups: &[usize], title: &str) -> String {
        let b = bounds(points.iter().copied());
        let mut s = frame(title);
        for (i, &p) in points.iter().enumerate() {
            let (x, y) = project(&b, p);
            let c = COLORS[groups.get(i).copied().unwrap_or(0) % COLORS.len()];
            let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{c}\"/>");
            if let Some(l) = labels.get(i) {
                let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", x + 7.0, y - 7.0, escape(l));
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn lines(series: &[(String, Vec<[f64; 2]>)], title: &str) -> String {
        let b = bounds(series.iter().flat_map(|(_, p)| p.iter().copied()));
        let mut s = frame(title);
        for (i, (name, pts)) in series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|&p| project(&b, p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", PAD + 8.0, PAD + 16.0 * (i + 1) as f64, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}
