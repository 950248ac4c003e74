//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::{Duration, Instant};

use fedstage_core::harness::{demo_scenario, replay_paper_stats, run_scenario, PUBLISHED_CONTROL, PUBLISHED_EXPERIMENT};
use fedstage_core::mim::{mim_loss, patchify, pretrain, sample_mask, unpatchify, MaskPlan, MimConfig};
use fedstage_core::model::{
    strip_head, Image, LayoutEntry, ModelArchitecture, ParameterSet, SgdConfig, TensorLayout,
};
use fedstage_core::protocol::{aggregate, client_run, ClientRequest, ClientUpdate, ServerState};
use fedstage_core::rng;
use fedstage_core::synth::{generate, unlabeled, DomainSpec, Motif};
use fedstage_core::transport::{decode_frame, encode_frame, encode_params, serve, Message, RemoteClient};
use fedstage_core::trust::{gate, p_value_two_tailed, Degeneracy, GateConfig, PairedSample, Verdict};
use fedstage_core::init_model;
use rand::seq::SliceRandom;
use rand::Rng;

/// Collected failures of one criterion.
#[derive(Default)]
struct Checks(Vec<String>);

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.0.push(what.into());
        }
    }

    fn near(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.check((got - want).abs() <= tol, format!("{name} = {got}, want {want} ± {tol}"));
    }
}

fn within(c: &mut Checks, name: &str, elapsed: Duration, limit: Duration) {
    c.check(elapsed < limit, format!("{name} took {elapsed:?}, limit {limit:?}"));
}

fn criterion_1() -> (Checks, String) {
    let mut c = Checks::default();
    let start = Instant::now();
    let g = replay_paper_stats().expect("published sample is valid");
    within(&mut c, "replay", start.elapsed(), Duration::from_secs(1));
    let r = &g.report;
    c.near("t", r.t, 2.678, 0.005);
    c.check(r.dof == 5, format!("dof = {}", r.dof));
    c.near("p", r.p_two_tailed, 0.0437, 0.0015);
    c.near("d", r.cohens_d, 1.093, 0.005);
    c.near("control mean", r.control_mean, 89.93, 0.01);
    c.near("control sd", r.control_sd, 7.83, 0.01);
    c.near("experiment mean", r.experiment_mean, 92.48, 0.01);
    c.near("experiment sd", r.experiment_sd, 6.87, 0.01);
    c.check(g.verdict == Verdict::RetainCandidate, format!("verdict {:?}", g.verdict));
    let detail = format!(
        "t({}) = {:.4}, p = {:.4}, d = {:.4}, control {:.2}/{:.2}, experiment {:.2}/{:.2}, {:?}",
        r.dof, r.t, r.p_two_tailed, r.cohens_d, r.control_mean, r.control_sd, r.experiment_mean,
        r.experiment_sd, g.verdict
    );
    (c, detail)
}

fn criterion_2() -> (Checks, String) {
    let mut c = Checks::default();
    let mut worst: f64 = 0.0;
    for dof in [1u32, 2, 5, 30] {
        for t in [0.0, 0.5, 1.0, 2.0, 2.678, 5.0, 10.0] {
            let p = p_value_two_tailed(t, dof as f64).expect("valid arguments");
            let q = common::p_value_by_quadrature(t, dof);
            worst = worst.max((p - q).abs());
            c.check((p - q).abs() < 1e-8, format!("t {t}, dof {dof}: {p} vs quadrature {q}"));
            if dof == 1 {
                let closed = 1.0 - 2.0 / std::f64::consts::PI * t.abs().atan();
                c.check((p - closed).abs() < 1e-8, format!("t {t}, dof 1: {p} vs arctan form {closed}"));
            }
        }
    }
    (c, format!("max |p - quadrature| = {worst:.2e} over 28 grid points"))
}

fn flat(values: Vec<f64>) -> ParameterSet {
    let l = TensorLayout::new(vec![LayoutEntry::new("w", vec![values.len()])]).unwrap();
    ParameterSet::new(l, values).unwrap()
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn criterion_3() -> (Checks, String) {
    let mut c = Checks::default();
    let mut r = rng::stream(2024);
    let mut coords = 0usize;
    for case in 0..1000 {
        let k = r.random_range(1..=8);
        let dim = r.random_range(1..=10_000);
        let scale = 10f64.powi(r.random_range(-3..=3));
        let vecs: Vec<Vec<f64>> =
            (0..k).map(|_| (0..dim).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).collect();
        let weights: Vec<u64> = (0..k).map(|_| r.random_range(1..=100_000)).collect();
        let updates: Vec<ClientUpdate> = vecs
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(i, (v, &m))| ClientUpdate::new(format!("client-{i}"), flat(v.clone()), m).unwrap())
            .collect();
        let agg = aggregate(&updates).unwrap();
        coords += dim;

        let convex = (0..dim).all(|j| {
            let lo = vecs.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
            let hi = vecs.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
            (lo..=hi).contains(&agg.values()[j])
        });
        c.check(convex, format!("case {case}: convexity violated"));

        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut r);
        let again = aggregate(&shuffled).unwrap();
        let same = agg.values().iter().zip(again.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        c.check(same, format!("case {case}: permutation changed the bits"));

        let m = r.random_range(1..=1000);
        let equal: Vec<ClientUpdate> = vecs
            .iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate::new(format!("client-{i}"), flat(v.clone()), m).unwrap())
            .collect();
        let eq = aggregate(&equal).unwrap();
        for j in 0..dim {
            let mean = vecs.iter().map(|v| v[j]).sum::<f64>() / k as f64;
            // relative to the magnitude of the summands, the scale of
            // floating summation error
            let mag = vecs.iter().map(|v| v[j].abs()).fold(0.0, f64::max);
            if (eq.values()[j] - mean).abs() > 1e-12 * mag {
                c.check(false, format!("case {case}, coord {j}: {} vs mean {mean}", eq.values()[j]));
                break;
            }
        }

        let z1 = &vecs[0];
        let z2: Vec<f64> = (0..dim).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect();
        let (m1, m2) = (r.random_range(10_000..=1_000_000u64), r.random_range(1..=100u64));
        let dom = aggregate(&[
            ClientUpdate::new("heavy", flat(z1.clone()), m1).unwrap(),
            ClientUpdate::new("light", flat(z2.clone()), m2).unwrap(),
        ])
        .unwrap();
        let bound = m2 as f64 / (m1 + m2) as f64 * norm(&z2, z1);
        let dist = norm(dom.values(), z1);
        // rounding the aggregate itself costs ~eps·‖z1‖, so the slack is
        // taken relative to the inputs' magnitude
        let mag = norm(z1, &vec![0.0; dim]).max(norm(&z2, &vec![0.0; dim]));
        c.check(
            dist <= bound + 1e-12 * mag,
            format!("case {case}: dominance {dist} > bound {bound}"),
        );
    }
    (c, format!("1000 update sets, {coords} coordinates"))
}

fn criterion_4() -> (Checks, String) {
    let mut c = Checks::default();
    let start = Instant::now();
    let (mut ce, mut mim) = (0.0f64, 0.0f64);
    for seed in 1..=5 {
        let (a, b) = (common::cross_entropy_fd_error(seed), common::mim_fd_error(seed));
        c.check(a < 1e-4, format!("cross-entropy seed {seed}: {a:e}"));
        c.check(b < 1e-4, format!("masked reconstruction seed {seed}: {b:e}"));
        ce = ce.max(a);
        mim = mim.max(b);
    }
    within(&mut c, "gradient checks", start.elapsed(), Duration::from_secs(30));
    (c, format!("max rel err cross-entropy {ce:.1e}, reconstruction {mim:.1e}"))
}

fn criterion_5() -> (Checks, String) {
    let mut c = Checks::default();
    let mut plans = 0;
    for n in 1..=64usize {
        for f in [0.1, 0.25, 0.5, 1.0] {
            for seed in 0..20 {
                let plan = sample_mask(n, f, &mut rng::stream(rng::derive(seed, n as u64)));
                plans += 1;
                let want = ((f * n as f64).round() as usize).clamp(1, n);
                let mut all: Vec<usize> = plan.visible().iter().chain(plan.masked()).copied().collect();
                all.sort_unstable();
                let ok = plan.visible().len() == want
                    && all == (0..n).collect::<Vec<_>>()
                    && MaskPlan::new(n, plan.visible().to_vec(), plan.masked().to_vec()).is_ok();
                c.check(ok, format!("n {n}, fraction {f}, seed {seed}: bad plan"));
            }
        }
    }
    let mut r = rng::stream(5);
    for (side, p) in [(16, 4), (12, 3), (8, 8), (5, 1), (6, 2)] {
        for _ in 0..20 {
            let img = Image::new(side, (0..side * side).map(|_| r.random::<f64>()).collect()).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), p).unwrap();
            let exact = back.pixels().iter().zip(img.pixels()).all(|(a, b)| a.to_bits() == b.to_bits());
            c.check(exact, format!("patchify round trip side {side}, patch {p}"));
        }
    }
    // mutation test: corrupting visible targets leaves the loss untouched
    let img = Image::new(16, (0..256).map(|_| r.random::<f64>()).collect()).unwrap();
    let targets = patchify(&img, 4).unwrap();
    let plan = sample_mask(16, 0.25, &mut r);
    let preds: Vec<Vec<f64>> =
        plan.masked().iter().map(|_| (0..16).map(|_| r.random::<f64>()).collect()).collect();
    let base = mim_loss(&preds, &targets, &plan).unwrap();
    let mut mutated = targets.clone();
    for &v in plan.visible() {
        mutated[v].iter_mut().for_each(|x| *x = 1e6);
    }
    let after = mim_loss(&preds, &mutated, &plan).unwrap();
    c.check(base.to_bits() == after.to_bits(), format!("visible mutation changed loss {base} -> {after}"));
    let mut masked_mut = targets.clone();
    masked_mut[plan.masked()[0]][0] += 1.0;
    c.check(mim_loss(&preds, &masked_mut, &plan).unwrap() != base, "masked mutation left the loss unchanged");
    (c, format!("{plans} mask plans, 100 patch round trips, visible-target mutation"))
}

fn criterion_6() -> (Checks, String) {
    let mut c = Checks::default();
    let start = Instant::now();
    let domain = |motif, seed| DomainSpec {
        domain_id: format!("{motif:?}"),
        num_classes: 3,
        image_side: 16,
        motif,
        class_separation: 0.6,
        noise_sd: 0.05,
        intensity_shift: 0.0,
        rotation_steps: 0,
        seed,
    };
    let mut images = unlabeled(&domain(Motif::Checker, 1), 16).unwrap();
    images.extend(unlabeled(&domain(Motif::Stripes, 2), 16).unwrap());
    let arch = ModelArchitecture::backbone(4, 16, 16, 32).unwrap();
    let cfg = MimConfig { visible_fraction: 0.25, epochs: 200, lr: 0.05, batch_size: 4, seed: 11, decoder_hidden: 32 };
    let out = pretrain(&images, &arch, &cfg).unwrap();
    let (first, last) = (out.loss_history[0], *out.loss_history.last().unwrap());
    c.check(last <= 0.5 * first, format!("final {last} > half of first {first}"));
    within(&mut c, "pretraining", start.elapsed(), Duration::from_secs(120));
    (c, format!("32 images, 200 epochs: loss {first:.4} -> {last:.4} (ratio {:.3})", last / first))
}

fn criterion_7() -> (Checks, String) {
    let mut c = Checks::default();
    let cfg = demo_scenario(42);
    let report = run_scenario(&cfg).unwrap();
    let json = serde_json::to_string_pretty(&report).unwrap();
    let again = serde_json::to_string_pretty(&run_scenario(&cfg).unwrap()).unwrap();
    c.check(json == again, "two runs with the same seed differ");
    c.check(report.rows.len() == 8, format!("{} rows", report.rows.len()));
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let rows = value["rows"].as_array().unwrap();
    for row in rows {
        let stage1 = row["stage"] == 1;
        let has_exp = row.get("experiment_accuracy").is_some();
        c.check(stage1 != has_exp, format!("row {row}: experiment column presence wrong"));
    }
    let gated: Vec<u64> = report.stages.iter().filter(|s| s.gate.is_some()).map(|s| s.stage).collect();
    c.check(gated == vec![4], format!("gate ran at stages {gated:?}"));
    let trend: Vec<String> = report.gain_curve.iter().map(|p| format!("{}:{:+.2}", p.stage, p.mean_gain)).collect();
    let verdict = report.stages[3].gate.as_ref().map(|g| g.verdict);
    (c, format!("8 rows, gate at stage 4 -> {verdict:?}; gain trend (not asserted) {}", trend.join(" ")))
}

fn criterion_8() -> (Checks, String) {
    let mut c = Checks::default();
    let cfg = GateConfig::default();
    let verdict = |ctrl: Vec<f64>, exp: Vec<f64>| gate(&PairedSample::new(ctrl, exp).unwrap(), &cfg).unwrap();
    let same = verdict(PUBLISHED_CONTROL.to_vec(), PUBLISHED_CONTROL.to_vec());
    c.check(same.verdict == Verdict::RetainBase, "identical arms not refused");
    c.check(same.report.degeneracy == Some(Degeneracy::AllZero), "identical arms not flagged all-zero");
    c.check(same.report.t == 0.0 && same.report.p_two_tailed == 1.0, "all-zero convention t = 0, p = 1");
    let published = verdict(PUBLISHED_CONTROL.to_vec(), PUBLISHED_EXPERIMENT.to_vec());
    c.check(published.verdict == Verdict::RetainCandidate, "published arms refused");
    let negated = verdict(PUBLISHED_EXPERIMENT.to_vec(), PUBLISHED_CONTROL.to_vec());
    c.check(negated.verdict == Verdict::RetainBase, "negated differences accepted");
    let up = verdict(vec![50.0, 60.0, 70.0], vec![52.0, 62.0, 72.0]);
    c.check(
        up.verdict == Verdict::RetainCandidate
            && up.report.degeneracy == Some(Degeneracy::Constant)
            && up.report.t == f64::INFINITY
            && up.report.p_two_tailed == 0.0,
        "constant positive differences: expected RetainCandidate with t = inf, p = 0",
    );
    let down = verdict(vec![52.0, 62.0, 72.0], vec![50.0, 60.0, 70.0]);
    c.check(
        down.verdict == Verdict::RetainBase && down.report.t == f64::NEG_INFINITY,
        "constant negative differences: expected RetainBase with t = -inf",
    );
    (c, "identical, published, negated, constant ±2 samples".into())
}

fn stage_clients() -> Vec<(String, fedstage_core::model::LabeledDataset, SgdConfig)> {
    ["north", "south"]
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let spec = DomainSpec {
                domain_id: id.to_string(),
                num_classes: 2 + i,
                image_side: 8,
                motif: [Motif::Rings, Motif::Checker][i],
                class_separation: 0.7,
                noise_sd: 0.05,
                intensity_shift: 0.0,
                rotation_steps: i as i32,
                seed: 30 + i as u64,
            };
            let data = generate(&spec, 12 + 4 * i, 4).unwrap().0;
            let sgd = SgdConfig { epochs: 3, lr: 0.1, batch_size: 4, seed: 7 + i as u64, freeze_backbone: false };
            (id.to_string(), data, sgd)
        })
        .collect()
}

fn criterion_9() -> (Checks, String) {
    let mut c = Checks::default();
    let l = TensorLayout::new(vec![LayoutEntry::new("w", vec![2])]).unwrap();
    let golden: [u8; 28] = [
        0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x77, 0x01, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
        0x00, 0x00, 0xF0, 0x3F, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40,
    ];
    let bytes = encode_params(&ParameterSet::new(l, vec![1.0, 2.0]).unwrap()).unwrap();
    c.check(bytes == golden, format!("golden bytes mismatch: {bytes:02X?}"));

    let arch = ModelArchitecture::backbone(2, 8, 4, 6).unwrap();
    let base = init_model(&arch, 21);
    let valid = encode_frame(&Message::UpdateSubmit(ClientUpdate::new("f", base.clone(), 3).unwrap())).unwrap();
    let mut r = rng::stream(77);
    let mut crashes = 0;
    for case in 0..10_000 {
        let input: Vec<u8> = match case % 3 {
            0 => (0..r.random_range(0..200)).map(|_| r.random()).collect(),
            1 => {
                let mut v = valid.clone();
                for _ in 0..r.random_range(1..8) {
                    let i = r.random_range(0..v.len());
                    v[i] = r.random();
                }
                v
            }
            _ => {
                let mut v = valid[..r.random_range(0..valid.len())].to_vec();
                v.extend((0..r.random_range(0..32)).map(|_| r.random::<u8>()));
                v
            }
        };
        if catch_unwind(|| decode_frame(&input)).is_err() {
            crashes += 1;
        }
    }
    c.check(crashes == 0, format!("{crashes} fuzz inputs crashed the decoder"));

    // one stage in process, then the same stage over sockets
    let clients = stage_clients();
    let mut local = ServerState::new(base.clone(), 2).unwrap();
    for (id, data, sgd) in &clients {
        let req = ClientRequest { client_id: id.clone(), num_classes: data.num_classes() };
        let served = local.handle_request(&req, local.head_seed_for(id)).unwrap();
        local.submit_update(client_run(id, &served, data, sgd).unwrap().update).unwrap();
    }
    local.end_stage(None).unwrap();

    let handle = serve(ServerState::new(base, 2).unwrap(), "127.0.0.1:0", Some(1)).unwrap();
    let addr = handle.local_addr();
    let workers: Vec<_> = clients
        .into_iter()
        .map(|(id, data, sgd)| {
            thread::spawn(move || {
                let mut conn = RemoteClient::connect(addr).unwrap();
                let req = ClientRequest { client_id: id.clone(), num_classes: data.num_classes() };
                let served = conn.request_model(&req).unwrap();
                let run = client_run(&id, &served, &data, &sgd).unwrap();
                assert_eq!(run.update.backbone(), &strip_head(&run.fine_tuned).unwrap());
                conn.submit_update(&run.update).unwrap()
            })
        })
        .collect();
    let acks: Vec<_> = workers.into_iter().map(|w| w.join()).collect();
    let remote = handle.wait();
    c.check(acks.iter().all(|a| matches!(a, Ok(ack) if ack.stage_index == 1)), "stage ack mismatch");
    let bitwise = remote.base().values().iter().zip(local.base().values()).all(|(a, b)| a.to_bits() == b.to_bits());
    c.check(bitwise && remote.base().layout() == local.base().layout(), "socket stage differs from in-process stage");
    c.check(remote.base() != &init_model(&arch, 21), "stage did not move the base");
    (c, "golden bytes, 10000 fuzz cases, loopback stage bit-exact".into())
}

type Criterion = fn() -> (Checks, String);

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("published statistics replay", criterion_1),
        ("Student-t CDF accuracy", criterion_2),
        ("aggregation properties", criterion_3),
        ("gradient correctness", criterion_4),
        ("mask and patch invariants", criterion_5),
        ("masked-patch pretraining progress", criterion_6),
        ("end-to-end stage walk-through", criterion_7),
        ("trust gate behaviour", criterion_8),
        ("transport", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok((checks, detail)) if checks.0.is_empty() => {
                println!("criterion {}: PASS  {name} ({secs:.2}s): {detail}", i + 1);
            }
            Ok((checks, detail)) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.2}s): {detail}", i + 1);
                for f in checks.0.iter().take(10) {
                    println!("    {f}");
                }
            }
            Err(_) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: panicked", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
