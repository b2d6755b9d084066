//! Acceptance criteria, one test per criterion. Each test writes a single
//! `criterion N: PASS|FAIL` line to stderr (bypassing output capture) and
//! then asserts. Tests share one lock so the timed training run never
//! competes with other work for the CPU.

use std::collections::{BTreeSet, HashSet};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use trajground::cli::{artifact, Command, Run};
use trajground::config::RunConfig;
use trajground::dataset::{
    build_rollout_episodes, build_training_episodes, construct_training_trajectory, find_positive_set, Construction,
    DataConfig, Split,
};
use trajground::eval::{
    correct_crop, correct_return, episode_metrics, evaluate_episodes, ndtw, summarize, EpisodeOutcome, GapReport,
    Prediction,
};
use trajground::loss::{bce_loss, dice_loss, focal_loss, LossConfig, LossVariant};
use trajground::model::{EpisodeInput, Layout, Model, ModelConfig};
use trajground::navgraph::{DistanceMetric, NavGraph, Path};
use trajground::numerics::{grad_check, scaled_attention, softmax, Forward, Tensor, Var};
use trajground::rng::{rng_for, Rng};
use trajground::synthworld::{generate_world, WorldSpec, HEADINGS, VIEWS};
use trajground::Error;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut line = format!("criterion {n}: {status} {title}: {detail}");
    if !failures.is_empty() {
        line.push_str(&format!(" [{}]", failures.join("; ")));
    }
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(failures.is_empty(), "{line}");
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

fn random_input(rng: &mut Rng, steps: usize, dv: usize, dt: usize) -> EpisodeInput {
    EpisodeInput::new(steps, dv, gaussian(rng, steps * VIEWS * dv), gaussian(rng, dt)).unwrap()
}

fn constant(fw: &mut Forward, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    fw.tape.constant(Tensor::matrix(rows, cols, data).unwrap())
}

fn tiny_model_config(max_steps: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        elevation_layers: 1,
        spatial_temporal_layers: 1,
        selection_layers: 1,
        max_steps,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let model = Model::init(tiny_model_config(3), 8, 8, 101).unwrap();
    let mut rng = rng_for(102, &[]);
    let inputs = vec![random_input(&mut rng, 3, 8, 8), random_input(&mut rng, 3, 8, 8)];
    let labels = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]];
    let loss = LossConfig::default();
    let f = |p: &trajground::numerics::ParamStore| {
        let m = Model {
            params: p.clone(),
            ..model.clone()
        };
        m.loss_and_grads(&inputs, &labels, &loss, None)
    };
    let report = grad_check(f, &model.params, 1e-5, 1e-4).unwrap();
    let elapsed = t0.elapsed();
    let mut failures = Vec::new();
    if !report.passed() {
        failures.push(format!("worst entry {:?}", report.worst));
    }
    if report.checked != model.params.numel() {
        failures.push(format!("checked {} of {} entries", report.checked, model.params.numel()));
    }
    if elapsed >= Duration::from_secs(60) {
        failures.push(format!("took {elapsed:.1?}"));
    }
    verdict(
        1,
        "end-to-end gradients match central differences",
        &failures,
        &format!(
            "max rel error {:.2e} over {} parameters ({} tensors) in {:.1?}",
            report.max_rel_error,
            report.checked,
            report.per_param.len(),
            elapsed
        ),
    );
}

#[test]
fn criterion_2_shapes_and_normalization() {
    let _g = serial();
    let mut failures = Vec::new();
    let d = 8;
    for seed in 0..200u64 {
        let mut rng = rng_for(seed, &[2]);
        let t = rng.random_range(1..=15usize);
        let model = Model::init(tiny_model_config(15), d, d, seed).unwrap();
        let x = random_input(&mut rng, t, d, d);
        let layout = Layout::new(vec![t]);

        let mut fw = Forward::eval(&model.params);
        let feats = constant(&mut fw, t * VIEWS, d, x.features.data().to_vec());
        let text = constant(&mut fw, 1, d, x.instruction.clone());
        let o = model.embed_trajectory(&mut fw, feats, &layout).unwrap();
        let fused = model.fuse_text_vision(&mut fw, o, text, &layout).unwrap();
        let fused_value = fw.tape.value(fused).clone();
        let h = model.elevation_fuse(&mut fw, fused, &layout).unwrap();
        let elevation_value = fw.tape.value(h).clone();
        let st = model.spatial_temporal(&mut fw, h, &layout).unwrap();
        let q = model.target_select(&mut fw, st, &layout).unwrap();
        let p = model.predict(&mut fw, q).unwrap();
        let shapes = [
            (fused_value.shape().to_vec(), vec![t * VIEWS, d]),
            (elevation_value.shape().to_vec(), vec![t * HEADINGS, d]),
            (fw.tape.value(st).shape().to_vec(), vec![t * HEADINGS, d]),
            (fw.tape.value(q).shape().to_vec(), vec![t, d]),
        ];
        for (i, (got, want)) in shapes.iter().enumerate() {
            if got != want {
                failures.push(format!("seed {seed} stage {i}: {got:?} != {want:?}"));
            }
        }
        let probs = fw.tape.value(p).data().to_vec();
        if probs.len() != t || probs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            failures.push(format!("seed {seed}: bad probabilities {probs:?}"));
        }

        // elevation permutation: shuffle the three elevations of every heading
        let mut permuted = fused_value.data().to_vec();
        for step in 0..t {
            for j in 0..HEADINGS {
                let mut order = [0usize, 1, 2];
                order.shuffle(&mut rng);
                for (e, &src) in order.iter().enumerate() {
                    let to = (step * VIEWS + e * HEADINGS + j) * d;
                    let from = (step * VIEWS + src * HEADINGS + j) * d;
                    permuted[to..to + d].copy_from_slice(&fused_value.data()[from..from + d]);
                }
            }
        }
        let mut fw2 = Forward::eval(&model.params);
        let v = constant(&mut fw2, t * VIEWS, d, permuted);
        let h2 = model.elevation_fuse(&mut fw2, v, &layout).unwrap();
        let diff = fw2.tape.value(h2).max_abs_diff(&elevation_value);
        if diff > 1e-12 {
            failures.push(format!("seed {seed}: elevation permutation changed output by {diff:e}"));
        }

        // softmax rows
        let rows = rng.random_range(1..6usize);
        let cols = rng.random_range(1..20usize);
        let logits: Vec<f64> = gaussian(&mut rng, rows * cols).iter().map(|z| z * 30.0).collect();
        let s = softmax(&Tensor::matrix(rows, cols, logits).unwrap()).unwrap();
        for r in s.data().chunks(cols) {
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
                failures.push(format!("seed {seed}: softmax row sums to {sum}"));
            }
        }

        // attention output lies in the per-column hull of the values
        let (nq, nk, dk) = (rng.random_range(1..6usize), rng.random_range(1..8usize), 4);
        let qm = Tensor::matrix(nq, dk, gaussian(&mut rng, nq * dk)).unwrap();
        let km = Tensor::matrix(nk, dk, gaussian(&mut rng, nk * dk)).unwrap();
        let vm = Tensor::matrix(nk, dk, gaussian(&mut rng, nk * dk)).unwrap();
        let out = scaled_attention(&qm, &km, &vm).unwrap();
        for c in 0..dk {
            let col: Vec<f64> = (0..nk).map(|r| vm.data()[r * dk + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..nq {
                let o = out.data()[r * dk + c];
                if o < lo - 1e-12 || o > hi + 1e-12 {
                    failures.push(format!("seed {seed}: attention output {o} outside [{lo}, {hi}]"));
                }
            }
        }
    }
    verdict(
        2,
        "shapes, softmax normalization, attention convexity, elevation permutation invariance",
        &failures,
        &format!("200 seeds, {} failures", failures.len()),
    );
}

#[test]
fn criterion_3_loss_values() {
    let _g = serial();
    let mut failures = Vec::new();
    let cfg = LossConfig::default();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if !((got - want).abs() <= tol) {
            failures.push(format!("{name}: {got} vs {want}"));
        }
        format!("{name}={got:.7}")
    };
    let y = [1.0, 0.0, 1.0, 0.0, 0.0];
    let dice = dice_loss(&y, &y, &cfg).unwrap().value;
    let a = check("dice(y=p)", dice, 0.0, 1e-6);
    let focal_one = focal_loss(&[1.0], &[1.0], &cfg).unwrap().value;
    let b = check("focal(1,1)", focal_one, 0.0, 0.0);
    let focal_half = focal_loss(
        &[0.5],
        &[1.0],
        &LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            ..cfg.clone()
        },
    )
    .unwrap()
    .value;
    let c = check("focal(1,0.5)", focal_half, 0.0433217, 1e-7);

    let mut rng = rng_for(3, &[]);
    let mut worst: f64 = 0.0;
    let plain = LossConfig {
        variant: LossVariant::Focal,
        alpha: 0.5,
        gamma: 0.0,
        ..cfg.clone()
    };
    for _ in 0..200 {
        let n = rng.random_range(1..12usize);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let oracle = -p
            .iter()
            .zip(&y)
            .map(|(&pi, &yi)| if yi > 0.5 { pi.ln() } else { (1.0 - pi).ln() })
            .sum::<f64>()
            / n as f64;
        let focal = focal_loss(&p, &y, &plain).unwrap().value;
        worst = worst.max((focal - 0.5 * oracle).abs());
        worst = worst.max((bce_loss(&p, &y).unwrap().value - oracle).abs());
    }
    check("max |focal(g=0,a=0.5) - BCE/2|", worst, 0.0, 1e-12);
    let d = format!("max |focal(g=0,a=0.5) - BCE/2|={worst:.1e}");
    verdict(3, "loss unit values", &failures, &format!("{a}, {b}, {c}, {d}"));
}

fn grid_graph(rng: &mut Rng) -> NavGraph {
    let n = rng.random_range(2..=25usize);
    let mut cells: Vec<(i32, i32)> = (0..8).flat_map(|x| (0..8).map(move |y| (x, y))).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    let nodes = cells
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| (format!("n{i}"), [f64::from(x), f64::from(y), 0.0]))
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let axis = cells[a].0 == cells[b].0 || cells[a].1 == cells[b].1;
            if axis && rng.random::<f64>() < 0.5 {
                edges.push((format!("n{a}"), format!("n{b}")));
            }
        }
    }
    NavGraph::new(nodes, &edges).unwrap()
}

fn floyd_warshall(g: &NavGraph) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (a, b, w) in g.edges() {
        d[a][b] = d[a][b].min(w);
        d[b][a] = d[b][a].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

fn naive_ndtw(dist: &[Vec<f64>], traj: &[usize], reference: &[usize], threshold: f64) -> f64 {
    let (n, m) = (traj.len(), reference.len());
    let mut table = vec![vec![f64::INFINITY; m + 1]; n + 1];
    table[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = table[i - 1][j].min(table[i][j - 1]).min(table[i - 1][j - 1]);
            table[i][j] = dist[traj[i - 1]][reference[j - 1]] + best;
        }
    }
    (-table[n][m] / (m as f64 * threshold)).exp()
}

fn random_walk(g: &NavGraph, rng: &mut Rng, len: usize) -> Path {
    let mut nodes = vec![rng.random_range(0..g.node_count())];
    while nodes.len() < len {
        let nb = g.neighbors(*nodes.last().unwrap());
        nodes.push(nb[rng.random_range(0..nb.len())].0);
    }
    g.path_from_nodes(nodes).unwrap()
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut rng = rng_for(4, &[]);
    let mut pairs = 0;
    for gi in 0..100 {
        let g = grid_graph(&mut rng);
        let oracle = floyd_warshall(&g);
        for a in 0..g.node_count() {
            for b in 0..g.node_count() {
                pairs += 1;
                match g.shortest_path(a, b) {
                    Ok(p) => {
                        let walked: f64 = p.nodes.windows(2).map(|w| g.edge_weight(w[0], w[1]).unwrap_or(f64::NAN)).sum();
                        if p.length != oracle[a][b] || walked != oracle[a][b] || p.start() != a || p.end() != b {
                            failures.push(format!("graph {gi} {a}->{b}: {} vs {}", p.length, oracle[a][b]));
                        }
                    }
                    Err(Error::NoPath { .. }) if oracle[a][b].is_infinite() => {}
                    Err(e) => failures.push(format!("graph {gi} {a}->{b}: {e}")),
                }
            }
        }
    }

    let world = generate_world(&WorldSpec::default(), 4).unwrap();
    let g = &world.graph;
    let dist = floyd_warshall(g);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let traj = random_walk(g, &mut rng, a);
        let reference = random_walk(g, &mut rng, b);
        let got = ndtw(g, &traj, &reference, 3.0).unwrap();
        worst = worst.max((got - naive_ndtw(&dist, &traj.nodes, &reference.nodes, 3.0)).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("ndtw deviates by {worst:e}"));
    }

    let data = DataConfig::default();
    let episodes = build_rollout_episodes(&world, 1000, 4, Split::ValUnseenLike, &data, &HashSet::new()).unwrap();
    let mut results = Vec::new();
    for ep in &episodes {
        let traj = g.path_from_ids(&ep.path).unwrap();
        let (start, target) = (g.node(&ep.start).unwrap(), g.node(&ep.target).unwrap());
        let reference = g.shortest_path(start, target).unwrap();
        let step = rng.random_range(0..traj.len());
        for path in [
            traj.clone(),
            correct_return(g, &traj, step).unwrap(),
            correct_crop(g, &traj, step).unwrap(),
        ] {
            let r = episode_metrics(g, &path, start, target, 3.0, &reference).unwrap();
            let s = f64::from(u8::from(r.success));
            if r.success && !r.oracle_success || r.spl > s || r.sdtw != s * r.ndtw {
                failures.push(format!("{}: {r:?}", ep.episode_id));
            }
            results.push(r);
        }
    }
    let sr = results.iter().filter(|r| r.success).count();
    let osr = results.iter().filter(|r| r.oracle_success).count();
    if sr > osr {
        failures.push(format!("aggregate SR {sr} > OSR {osr}"));
    }
    verdict(
        4,
        "shortest paths, nDTW and metric invariants against oracles",
        &failures,
        &format!(
            "{pairs} node pairs on 100 graphs, nDTW max deviation {worst:.1e} on 100 pairs, invariants on {} episodes",
            episodes.len()
        ),
    );
}

#[test]
fn criterion_5_dataset_builder() {
    let _g = serial();
    let mut failures = Vec::new();
    let world = generate_world(&WorldSpec::default(), 5).unwrap();
    let g = &world.graph;
    let data = DataConfig::default();
    let mut rng = rng_for(5, &[]);
    let (mut built, mut final_positive, mut max_expansion) = (0usize, 0usize, 0.0f64);
    while built < 1000 {
        let target = world.scene.anchors[rng.random_range(0..world.scene.anchors.len())];
        let start = rng.random_range(0..g.node_count());
        if g.geodesic(start, target).unwrap() <= data.radius {
            continue;
        }
        let z: BTreeSet<usize> = find_positive_set(g, target, data.radius, DistanceMetric::Geodesic).unwrap();
        let t = match construct_training_trajectory(g, start, &z, data.expand_budget, &mut rng).unwrap() {
            Construction::Trajectory(t) => t,
            Construction::Restart => continue,
        };
        built += 1;
        if let Err(e) = g.path_from_nodes(t.path.clone()) {
            failures.push(format!("trajectory {built}: {e}"));
        }
        if t.path[0] != start {
            failures.push(format!("trajectory {built} does not begin at its start"));
        }
        for &s in &t.positive_steps {
            let dist = g.geodesic(t.path[s], target).unwrap();
            if dist > data.radius {
                failures.push(format!("trajectory {built}: positive step {s} is {dist} m away"));
            }
        }
        let last_pos = *t.positive_steps.iter().max().unwrap();
        let tail: f64 = t.path[last_pos..]
            .windows(2)
            .map(|w| g.edge_weight(w[0], w[1]).unwrap())
            .sum();
        max_expansion = max_expansion.max(tail).max(t.expansion_length);
        if tail > data.expand_budget + 1e-9 || t.expansion_length > data.expand_budget + 1e-9 {
            failures.push(format!("trajectory {built}: expansion {tail} m"));
        }
        if t.positive_steps.contains(&(t.path.len() - 1)) {
            final_positive += 1;
        }
    }
    let fraction = final_positive as f64 / built as f64;
    if fraction >= 0.9 {
        failures.push(format!("final step positive in {:.1}% of trajectories", 100.0 * fraction));
    }
    let episodes = build_training_episodes(&world, 1000, 5, &data).unwrap();
    for ep in &episodes {
        if let Err(e) = ep.validate(g, data.radius, data.metric) {
            failures.push(e.to_string());
        }
    }
    verdict(
        5,
        "training trajectories respect adjacency, radius and expansion budget",
        &failures,
        &format!(
            "1000 constructed + {} built episodes, final-step positive {:.1}%, max expansion {max_expansion:.2} m",
            episodes.len(),
            100.0 * fraction
        ),
    );
}

fn last_step_predictions(episodes: &[trajground::dataset::Episode]) -> Vec<Prediction> {
    episodes
        .iter()
        .map(|e| Prediction {
            episode_id: e.episode_id.clone(),
            predicted_step: e.path.len() - 1,
            probabilities: vec![0.0; e.path.len()],
        })
        .collect()
}

#[test]
fn criterion_6_synthetic_gap() {
    let _g = serial();
    let spec = WorldSpec {
        node_count: 60,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec, 7).unwrap();
    let data = DataConfig {
        p_overshoot: 0.5,
        k_extra: 3,
        ..DataConfig::default()
    };
    let episodes = build_rollout_episodes(&world, 200, 6, Split::ValUnseenLike, &data, &HashSet::new()).unwrap();
    let outcomes = evaluate_episodes(&world.graph, &episodes, &last_step_predictions(&episodes), 3.0).unwrap();
    let b = summarize(&outcomes, 3.0).baseline;
    let mut failures = Vec::new();
    if b.gap < 0.15 {
        failures.push(format!("gap {:.1} pp", 100.0 * b.gap));
    }
    verdict(
        6,
        "baseline overshoot agent leaves an SR/OSR gap",
        &failures,
        &format!(
            "{} episodes, SR {:.1}%, OSR {:.1}%, gap {:.1} pp",
            episodes.len(),
            100.0 * b.sr,
            100.0 * b.osr,
            100.0 * b.gap
        ),
    );
}

struct PipelineRun {
    report: GapReport,
    outcomes: Vec<EpisodeOutcome>,
    elapsed: Duration,
}

fn run_pipeline(cfg: RunConfig) -> Result<PipelineRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = cfg;
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let run = Run::new(cfg, true);
    let t0 = Instant::now();
    run.dispatch(Command::Pipeline).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let read = |name: &str| std::fs::read_to_string(run.path(name)).map_err(|e| e.to_string());
    let report = serde_json::from_str(&read(artifact::REPORT_JSON)?).map_err(|e| e.to_string())?;
    let outcomes = read(artifact::OUTCOMES)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok(PipelineRun {
        report,
        outcomes,
        elapsed,
    })
}

fn gap_config() -> RunConfig {
    RunConfig::load(&configs_dir().join("gap.json")).unwrap()
}

fn full_run() -> &'static Result<PipelineRun, String> {
    static FULL: OnceLock<Result<PipelineRun, String>> = OnceLock::new();
    FULL.get_or_init(|| run_pipeline(gap_config()))
}

fn recovery(r: &GapReport) -> f64 {
    (r.corrected_return.metrics.sr - r.baseline.sr) / r.baseline.gap
}

#[test]
fn criterion_7_gap_closing() {
    let _g = serial();
    let cfg = gap_config();
    let run = full_run().as_ref().expect("gap pipeline");
    let r = &run.report;
    let mut failures = Vec::new();
    let (m, t) = (&cfg.model, &cfg.train);
    if (m.d, m.heads, m.elevation_layers, m.spatial_temporal_layers, m.selection_layers) != (32, 4, 2, 2, 2)
        || (t.iterations, t.batch_size, t.seed, cfg.data.train_count, r.episodes) != (5000, 16, 7, 500, 100)
    {
        failures.push("gap config does not match the prescribed setup".into());
    }
    let rec = recovery(r);
    if !(rec >= 0.6) {
        failures.push(format!("recovered {:.1}% of the gap", 100.0 * rec));
    }
    if r.corrected_return.metrics.osr != r.baseline.osr {
        failures.push("return correction changed OSR".into());
    }
    let worse = run
        .outcomes
        .iter()
        .filter(|o| o.corrected_crop.spl < o.corrected_return.spl)
        .count();
    if worse > 0 {
        failures.push(format!("crop SPL below return SPL in {worse} episodes"));
    }
    if run.elapsed >= Duration::from_secs(15 * 60) {
        failures.push(format!("pipeline took {:.1?}", run.elapsed));
    }
    verdict(
        7,
        "return correction closes the SR/OSR gap",
        &failures,
        &format!(
            "SR {:.1}% -> {:.1}%, OSR {:.1}% -> {:.1}%, recovery {:.1}%, crop SPL {:.1}% vs return SPL {:.1}%, runtime {:.0} s",
            100.0 * r.baseline.sr,
            100.0 * r.corrected_return.metrics.sr,
            100.0 * r.baseline.osr,
            100.0 * r.corrected_return.metrics.osr,
            100.0 * rec,
            100.0 * r.corrected_crop.metrics.spl,
            100.0 * r.corrected_return.metrics.spl,
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_ablation_direction() {
    let _g = serial();
    let full = full_run().as_ref().expect("gap pipeline");
    let full_sr = full.report.corrected_return.metrics.sr;
    let mut deltas = Vec::new();
    let mut failures = Vec::new();
    for (name, key) in [("elevation", "model.elevation_on"), ("spatial-temporal", "model.st_on"), ("selection", "model.selection_on")] {
        let cfg = gap_config().with_overrides(&[format!("{key}=false")]).unwrap();
        let run = run_pipeline(cfg).expect("ablation pipeline");
        let sr = run.report.corrected_return.metrics.sr;
        if name == "elevation" && sr > full_sr {
            failures.push(format!("elevation-off SR {:.1}% above full {:.1}%", 100.0 * sr, 100.0 * full_sr));
        }
        deltas.push((name, sr - full_sr));
    }
    let mut ordered = deltas.clone();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1));
    let text: Vec<String> = deltas.iter().map(|(n, d)| format!("{n} off {:+.1} pp", 100.0 * d)).collect();
    verdict(
        8,
        "removing the elevation stage does not help",
        &failures,
        &format!(
            "full corrected SR {:.1}%; {}; largest drop: {}",
            100.0 * full_sr,
            text.join(", "),
            ordered[0].0
        ),
    );
}

#[test]
fn criterion_9_pipeline_determinism() {
    let _g = serial();
    let cfg = RunConfig::load(&configs_dir().join("smoke.json")).unwrap();
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg.clone();
        c.out_dir = dir.path().to_string_lossy().into_owned();
        let run = Run::new(c, true);
        for command in [Command::GenWorld, Command::BuildData, Command::Train, Command::Eval, Command::Report] {
            run.dispatch(command).unwrap();
        }
        reports.push(std::fs::read(run.path(artifact::REPORT_JSON)).unwrap());
        models.push(std::fs::read(run.path(artifact::MODEL)).unwrap());
    }
    let mut failures = Vec::new();
    if reports[0] != reports[1] {
        failures.push("report JSON differs".into());
    }
    if models[0] != models[1] {
        failures.push("model checkpoint differs".into());
    }
    verdict(
        9,
        "staged pipeline is byte-for-byte reproducible",
        &failures,
        &format!("two runs, report JSON {} bytes identical", reports[0].len()),
    );
}
