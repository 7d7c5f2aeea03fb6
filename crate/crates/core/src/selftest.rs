//! Built-in consistency checks: loop oracles against the graph operators,
//! finite-difference gradient checks and a few exact metric values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::blend::{
    scm_forward, tcm_forward, temporal_attention_map, temporal_softmax, EmbeddingStrategy, ScmWeights, TcmWeights,
};
use crate::error::Result;
use crate::eval::{average_precision, threshold_sweep_ap, Detection, GroundTruth};
use crate::oracle;
use crate::tensor::gradcheck::{check_op, GradCheckConfig};
use crate::tensor::{checkpoint_bytes, parse_checkpoint, Graph, ParamStore, Tensor, Var};

/// Tolerance between graph operators and loop oracles.
pub const ORACLE_TOL: f64 = 1e-10;
/// Relative error bound of op-level gradient checks.
pub const OP_GRAD_TOL: f64 = 1e-4;

/// A random blending problem small enough for the loop oracles.
#[derive(Clone, Debug)]
pub struct BlendCase {
    pub frames: Vec<Tensor>,
    pub main: usize,
    pub scm: ScmWeights,
    pub tcm: TcmWeights,
}

/// Seeded case with `T ∈ {1,3,5}`, `C ≤ 8`, spatial extent up to 6×6 and
/// a weight bank that is sometimes narrower than the window.
pub fn blend_case(seed: u64) -> BlendCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = [1, 3, 5][rng.random_range(0..3)];
    let c = rng.random_range(1..=4) * 2;
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let bank = if t > 1 && rng.random_bool(0.25) { t - 2 } else { t };
    let ratio = if rng.random_bool(0.5) { 2 } else { 1 };
    let frames = (0..t).map(|_| Tensor::randn([c, h, w], 1.0, &mut rng)).collect();
    let std = rng.random_range(0.1..1.0);
    let scm = ScmWeights::new(
        Tensor::randn([1, c], std, &mut rng),
        Tensor::randn([c / ratio, c], std, &mut rng),
        Tensor::randn([c, c / ratio], std, &mut rng),
    )
    .expect("consistent shapes");
    let mut banks = |shape: [usize; 2]| -> Vec<Tensor> { (0..bank).map(|_| Tensor::randn(shape, std, &mut rng)).collect() };
    let tcm = TcmWeights::new(banks([1, c]), banks([c, c]), banks([c, c])).expect("consistent shapes");
    BlendCase {
        frames,
        main: t / 2,
        scm,
        tcm,
    }
}

/// Largest deviation between each blending operator and its loop oracle:
/// `[scm, temporal softmax, attention map, tcm]`.
pub fn oracle_deviation(case: &BlendCase) -> Result<[f64; 4]> {
    let main = &case.frames[case.main];
    let scm = case.scm.forward(main)?.max_abs_diff(&oracle::scm(main, &case.scm));

    let (c, h, w) = (main.shape()[0], main.shape()[1], main.shape()[2]);
    let t = case.frames.len();
    let mut rng = ChaCha8Rng::seed_from_u64((c * 100 + h * 10 + w) as u64);
    let emb = Tensor::randn([t, h, w], 2.0, &mut rng);
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let sm = temporal_softmax(&mut g, e)?;
    let maps = temporal_attention_map(&mut g, sm)?;
    let soft_ref = oracle::temporal_softmax(&emb);
    let softmax = g.value(sm).max_abs_diff(&soft_ref);
    let map = g.value(maps).max_abs_diff(&oracle::temporal_attention_map(&soft_ref));

    let tcm = case
        .tcm
        .forward(&case.frames, case.main, EmbeddingStrategy::Positional)?
        .max_abs_diff(&oracle::tcm(&case.frames, case.main, &case.tcm));
    Ok([scm, softmax, map, tcm])
}

impl BlendCase {
    /// Same case with `t` frames (reusing or extending the sampled ones).
    pub fn with_support(mut self, t: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let shape = self.frames[0].shape().to_vec();
        self.frames.truncate(t);
        while self.frames.len() < t {
            self.frames.push(Tensor::randn(shape.clone(), 1.0, &mut rng));
        }
        self.main = t / 2;
        self
    }
}

/// Largest analytic gradient magnitude reaching the reference frames of a
/// TCM forward pass, under `MainAndRefs` and under `Positional`.
pub fn reference_gradients(case: &BlendCase) -> Result<(f64, f64)> {
    let grad = |strategy| -> Result<f64> {
        let mut g = Graph::new();
        let xs: Vec<Var> = case.frames.iter().map(|f| g.param(f.clone())).collect();
        let w = case.tcm.bind(&mut g, true);
        let out = tcm_forward(&mut g, &xs, case.main, &w, strategy)?.out;
        let sq = g.mul(out, out)?;
        let loss = g.sum_all(sq)?;
        g.backward(loss)?;
        Ok(xs
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != case.main)
            .flat_map(|(_, &x)| g.grad_or_zeros(x).into_data())
            .fold(0.0, |m, v| m.max(v.abs())))
    };
    Ok((grad(EmbeddingStrategy::MainAndRefs)?, grad(EmbeddingStrategy::Positional)?))
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("[{}] {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        out
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Op-level gradient problems: name, inputs and graph builder.
pub fn gradient_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], std: f64| Tensor::randn(shape.to_vec(), std, &mut rng);
    let away_from_zero = |t: Tensor| t.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let probs = r(&[12], 1.0).map(|v| 1.0 / (1.0 + (-v).exp()));
    let labels: Vec<i8> = (0..12).map(|i| [1, 0, -1][i % 3]).collect();
    let targets: Vec<f64> = r(&[10], 1.0).into_data();
    let mask: Vec<bool> = (0..10).map(|i| i % 4 != 0).collect();
    let (c, h, w) = (4, 5, 4);
    let frames: Vec<Tensor> = (0..3).map(|_| r(&[c, h, w], 1.0)).collect();
    let tcm_w: Vec<Tensor> = (0..3)
        .flat_map(|_| [r(&[1, c], 0.5), r(&[c, c], 0.5), r(&[c, c], 0.5)])
        .collect();
    let tcm_inputs = [frames.clone(), tcm_w].concat();
    let tcm_build = |strategy: EmbeddingStrategy| -> Build {
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let vars = crate::blend::TcmVars {
                w4: vec![v[3], v[6], v[9]],
                w5: vec![v[4], v[7], v[10]],
                w6: vec![v[5], v[8], v[11]],
            };
            Ok(tcm_forward(g, &v[..3], 1, &vars, strategy)?.out)
        })
    };
    vec![
        ("conv3x3 stride 2", vec![r(&[3, 7, 6], 1.0), r(&[4, 3, 3, 3], 0.5)], Box::new(|g, v| g.conv3x3(v[0], v[1], 2, 1))),
        ("conv3x3 stride 1", vec![r(&[2, 5, 5], 1.0), r(&[3, 2, 3, 3], 0.5)], Box::new(|g, v| g.conv3x3(v[0], v[1], 1, 1))),
        ("conv1x1", vec![r(&[3, 4, 5], 1.0), r(&[2, 3], 0.5)], Box::new(|g, v| g.conv1x1(v[0], v[1]))),
        ("matmul", vec![r(&[3, 4], 1.0), r(&[4, 2], 1.0)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("broadcast add", vec![r(&[3, 2, 2], 1.0), r(&[3, 1, 1], 1.0)], Box::new(|g, v| g.broadcast_add(v[0], v[1]))),
        ("relu", vec![away_from_zero(r(&[2, 3, 3], 1.0))], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("sigmoid", vec![r(&[7], 2.0)], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("softmax", vec![r(&[3, 4, 2], 1.5)], Box::new(|g, v| g.softmax(v[0], 1))),
        ("group norm", vec![r(&[4, 3, 2], 1.0)], Box::new(|g, v| g.group_norm(v[0], 2, 1e-5))),
        ("sum over", vec![r(&[3, 4, 2], 1.0)], Box::new(|g, v| g.sum_over(v[0], &[1, 2]))),
        ("upsample", vec![r(&[2, 2, 3], 1.0)], Box::new(|g, v| g.upsample_nearest(v[0], 4, 5))),
        (
            "stack select",
            vec![r(&[2, 3], 1.0), r(&[2, 3], 1.0)],
            Box::new(|g, v| {
                let s = g.stack(&[v[0], v[1]])?;
                let a = g.select(s, 1)?;
                g.mul(a, v[0])
            }),
        ),
        (
            "focal loss",
            vec![probs],
            Box::new(move |g, v| g.focal_loss(v[0], labels.clone(), 0.25, 2.0, 3.0)),
        ),
        (
            "smooth l1",
            vec![r(&[10], 0.3)],
            Box::new(move |g, v| g.smooth_l1(v[0], targets.clone(), mask.clone(), 1.0 / 9.0, 2.0)),
        ),
        (
            "scm",
            vec![r(&[4, 3, 5], 1.0), r(&[1, 4], 0.5), r(&[2, 4], 0.5), r(&[4, 2], 0.5)],
            Box::new(|g, v| {
                let w = crate::blend::ScmVars { w1: v[1], w2: v[2], w3: v[3] };
                Ok(scm_forward(g, v[0], &w)?.out)
            }),
        ),
        (
            "attention map",
            vec![r(&[3, 2, 4], 1.0)],
            Box::new(|g, v| {
                let s = temporal_softmax(g, v[0])?;
                temporal_attention_map(g, s)
            }),
        ),
        ("tcm positional", tcm_inputs, tcm_build(EmbeddingStrategy::Positional)),
    ]
}

/// Two ground truths, one false positive ranked between two hits.
pub fn reference_ap_case() -> (Vec<Detection>, Vec<GroundTruth>) {
    let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
    let g2 = BBox::new(20.0, 0.0, 30.0, 10.0);
    let fp = BBox::new(50.0, 50.0, 60.0, 60.0);
    let det = |b, score| Detection { image: 0, bbox: b, class: 0, score };
    let gt = |b| GroundTruth { image: 0, bbox: b, class: 0, visibility: 1.0 };
    (vec![det(g1, 0.9), det(fp, 0.8), det(g2, 0.7)], vec![gt(g1), gt(g2)])
}

/// Runs every check. `oracle_cases` sets how many random blending problems
/// are compared against the loop oracles.
pub fn run_selftest(oracle_cases: usize) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();

    let mut worst = [0.0f64; 4];
    for seed in 0..oracle_cases as u64 {
        let dev = oracle_deviation(&blend_case(seed))?;
        for (w, d) in worst.iter_mut().zip(dev) {
            *w = w.max(d);
        }
    }
    for (name, w) in ["scm oracle", "temporal softmax oracle", "attention map oracle", "tcm oracle"].iter().zip(worst) {
        report.push(name, w <= ORACLE_TOL, format!("max |diff| {w:.3e} over {oracle_cases} cases"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn([4, 6, 5], 1.0, &mut rng);
    let w = Tensor::randn([3, 4, 3, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let conv = g.conv3x3(xv, wv, 2, 1)?;
    let d3 = g.value(conv).max_abs_diff(&oracle::conv2d(&x, &w, 2, 1));
    let w1 = Tensor::randn([5, 4], 1.0, &mut rng);
    let w1v = g.constant(w1.clone());
    let conv1 = g.conv1x1(xv, w1v)?;
    let d1 = g.value(conv1).max_abs_diff(&oracle::conv1x1(&x, &w1));
    report.push("convolution oracle", d3.max(d1) <= ORACLE_TOL, format!("3x3 {d3:.3e}, 1x1 {d1:.3e}"));

    let probs: Vec<f64> = (0..9).map(|i| (i as f64 + 0.5) / 9.0).collect();
    let labels: Vec<i8> = (0..9).map(|i| [1, 0, -1][i % 3]).collect();
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(probs.clone()));
    let fl = g.focal_loss(p, labels.clone(), 0.25, 2.0, 2.0)?;
    let dfl = (g.value(fl).data()[0] - oracle::focal_loss(&probs, &labels, 0.25, 2.0, 2.0)).abs();
    report.push("focal loss oracle", dfl <= ORACLE_TOL, format!("|diff| {dfl:.3e}"));

    for (name, inputs, build) in gradient_cases(5) {
        let r = check_op(&inputs, build, GradCheckConfig::default())?;
        report.push(
            &format!("gradient {name}"),
            r.passes(OP_GRAD_TOL),
            format!("max rel err {:.3e} over {} elements", r.max_rel_err, r.checked),
        );
    }

    let (blocked, open) = reference_gradients(&blend_case(7).with_support(3))?;
    report.push(
        "main_and_refs blocks reference gradients",
        blocked <= 1e-9 && open > 1e-6,
        format!("max |dL/dref| {blocked:.3e} (positional {open:.3e})"),
    );

    let mut worst_sum = 0.0f64;
    for seed in 0..200u64 {
        let case = blend_case(1000 + seed);
        let t = case.frames.len();
        let (h, w) = (case.frames[0].shape()[1], case.frames[0].shape()[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let e = g.constant(Tensor::randn([t, h, w], 5.0, &mut rng));
        let s = temporal_softmax(&mut g, e)?;
        let sums = g.sum_over(s, &[0])?;
        worst_sum = g.value(sums).data().iter().fold(worst_sum, |m, v| m.max((v - 1.0).abs()));
    }
    report.push("softmax weights sum to one", worst_sum <= 1e-12, format!("max |sum - 1| {worst_sum:.3e}"));

    let (dets, gts) = reference_ap_case();
    let ap = average_precision(&dets, &gts, 0.5).ap;
    let sweep = threshold_sweep_ap(&dets, &gts, 0.5);
    report.push(
        "reference AP",
        (ap - 5.0 / 6.0).abs() < 1e-12 && (ap - sweep).abs() < 1e-12,
        format!("ap {ap:.4}, sweep {sweep:.4}"),
    );

    let mut params = ParamStore::new();
    params.insert("a.w", Tensor::randn([3, 2], 1.0, &mut rng));
    params.insert("b", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
    let back = parse_checkpoint(&checkpoint_bytes(&params))?;
    let same = back.iter().zip(params.iter()).all(|((n1, t1), (n2, t2))| {
        n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }) && back.len() == params.len();
    report.push("checkpoint roundtrip", same, format!("{} records", params.len()));

    Ok(report)
}
