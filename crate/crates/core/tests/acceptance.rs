//! End-to-end acceptance checks. Each test prints one line
//! `ACCEPT <n> PASS|FAIL <what> | <measurements>` and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pqf::bench::{median_errors, run_bench, BenchConfig, Generator, Method};
use pqf::codec::{encode_layer, bit_report, quantization_error, LayerCompressionConfig, Quantizer};
use pqf::finetune::{
    centroid_gradients, recovery_experiment, residual_net, softmax_cross_entropy, ToyKind, ToyNetwork, RecoveryConfig,
    WeightSource,
};
use pqf::graph::{apply_group_permutation, resolve_groups, verify_equivalence};
use pqf::layout::{split_matrix, Geometry};
use pqf::permsearch::{greedy_init, local_search, rd_lower_bound, subvector_covariance, Permutation};
use pqf::quantize::{kmeans, src, SrcConfig};
use pqf::tensor_io::{
    code_bits, compressed_from_bytes, compressed_to_bytes, load_arch, load_compressed, save_compressed, pack_codes,
    unpack_codes, LayerKind, LayerMeta, TensorRecord,
};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn verdict(n: u32, what: &str, pass: bool, detail: String, elapsed: Duration, budget: Duration) {
    let pass = pass && elapsed <= budget;
    // the raw handle is not captured by the test harness, so the line shows up in plain `cargo test`
    let line = format!(
        "ACCEPT {n:>2} {} {what} | {detail} | {:.2}s (budget {}s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracles do not share the library sampler
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

#[test]
fn criterion_01_bit_accounting_golden() {
    let t = Instant::now();
    let arch = load_arch(data("resnet18.arch")).unwrap();
    let report = bit_report(&arch, &LayerCompressionConfig::default()).unwrap();
    let golden = std::fs::read_to_string(data("resnet18_bits.csv")).unwrap();
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for line in golden.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0].starts_with("total_") {
            totals.push((f[0].to_string(), f[3].to_string()));
        } else {
            rows.push((f[0].to_string(), f[1].to_string(), f[2].to_string(), f[3].parse::<u64>().unwrap()));
        }
    }
    let mut mismatches = Vec::new();
    if rows.len() != report.rows.len() {
        mismatches.push(format!("{} rows vs {} golden", report.rows.len(), rows.len()));
    }
    for (g, r) in rows.iter().zip(&report.rows) {
        let shape = r.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x");
        if (g.0.as_str(), g.1.as_str(), g.2.as_str(), g.3) != (r.name.as_str(), shape.as_str(), r.dtype, r.bits) {
            mismatches.push(format!("{g:?} vs {} {shape} {} {}", r.name, r.dtype, r.bits));
        }
    }
    let ours = [
        ("total_bits", report.total_bits().to_string()),
        ("total_bytes", format!("{}", report.total_bits() / 8)),
        ("total_KB", format!("{:.2}", report.total_kb())),
        ("total_MB", format!("{:.2}", report.total_mb())),
    ];
    for ((gk, gv), (ok, ov)) in totals.iter().zip(ours.iter()) {
        if gk != ok || gv != ov {
            mismatches.push(format!("{gk}={gv} vs {ok}={ov}"));
        }
    }
    let mut out = Vec::new();
    let arch_path = data("resnet18.arch");
    let argv = ["pqf", "report", arch_path.to_str().unwrap(), "--regime", "small", "--k", "256"];
    let code = pqf::cli::dispatch_to(argv, &mut out);
    let text = String::from_utf8(out).unwrap();
    let last = text.lines().last().unwrap_or("").to_string();
    let pass = mismatches.is_empty() && code == 0 && last == "total_MB 1.54" && report.total_bits() == 12_927_232;
    verdict(
        1,
        "ResNet-18 bit allocation",
        pass,
        format!("{} rows, total_bits {}, last line `{last}`, {} mismatches {:?}", report.rows.len(), report.total_bits(), mismatches.len(), mismatches.first()),
        t.elapsed(),
        Duration::from_secs(1),
    );
}

/// Reads `parents`/`children` bracket lists without the library parser.
fn golden_groups(text: &str) -> BTreeSet<(Vec<String>, Vec<String>)> {
    let mut lists = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let close = rest[open..].find(']').unwrap() + open;
        let mut names: Vec<String> =
            rest[open + 1..close].split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        names.sort();
        lists.push(names);
        rest = &rest[close + 1..];
    }
    lists.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect()
}

#[test]
fn criterion_02_permutation_groups_golden() {
    let t = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for (arch, listing, expected) in [("resnet18.arch", "resnet18.groups", 12), ("resnet50.arch", "resnet50.groups", 37)] {
        let groups = resolve_groups(&load_arch(data(arch)).unwrap()).unwrap();
        let ours: BTreeSet<_> = groups.iter().map(|g| (g.parents.clone(), g.children.clone())).collect();
        let golden = golden_groups(&std::fs::read_to_string(data(listing)).unwrap());
        let ok = groups.len() == expected && golden.len() == expected && ours == golden;
        pass &= ok;
        let missing = golden.difference(&ours).count();
        details.push(format!("{arch}: {} groups (golden {}), {missing} unmatched", groups.len(), golden.len()));
    }
    verdict(2, "permutation groups", pass, details.join("; "), t.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_03_functional_equivalence() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut triples = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let net = residual_net(seed);
        let ckpt = net.to_checkpoint();
        let groups = resolve_groups(&ckpt).unwrap();
        assert!(!groups.is_empty());
        let group = &groups[rng.gen_range(0..groups.len())];
        let units = group.channels / group.channel_block;
        let mut order: Vec<usize> = (0..units).collect();
        order.shuffle(&mut rng);
        let perm: Vec<usize> =
            order.iter().flat_map(|&u| (0..group.channel_block).map(move |r| u * group.channel_block + r)).collect();
        let permuted = apply_group_permutation(&ckpt, group, &perm).unwrap();
        let width = net.input_shape().width();
        let probes: Vec<Vec<f64>> = (0..100).map(|_| (0..width).map(|_| normal(&mut rng)).collect()).collect();
        worst = worst.max(verify_equivalence(&ckpt, &permuted, &probes).unwrap());
        triples += 1;
    }
    verdict(
        3,
        "functional equivalence under group permutations",
        worst <= 1e-9 && triples == 100,
        format!("{triples} triples, max |f_a - f_b| = {worst:.3e} (tol 1e-9)"),
        t.elapsed(),
        Duration::from_secs(10),
    );
}

/// Log-determinant of the sample covariance of the d=2 subvectors of the
/// row-permuted matrix.
fn oracle_logdet(m: &Array2<f64>, order: &[usize]) -> f64 {
    let d = 2;
    let mut vecs = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..order.len() / d {
            vecs.push([m[[order[2 * i], j]], m[[order[2 * i + 1], j]]]);
        }
    }
    let n = vecs.len() as f64;
    let mean = [vecs.iter().map(|v| v[0]).sum::<f64>() / n, vecs.iter().map(|v| v[1]).sum::<f64>() / n];
    let mut c = DMatrix::<f64>::zeros(2, 2);
    for v in &vecs {
        for a in 0..2 {
            for b in 0..2 {
                c[(a, b)] += (v[a] - mean[a]) * (v[b] - mean[b]) / n;
            }
        }
    }
    c.determinant().ln()
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn criterion_04_permutation_oracle() {
    let t = Instant::now();
    let perms = all_permutations(8);
    let mut hits = 0;
    let mut worst_gap = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = gaussian(8, 8, &mut rng);
        let z = gaussian(8, 64, &mut rng);
        let m = mix.dot(&z);
        let optimum = perms.iter().map(|p| oracle_logdet(&m, p)).fold(f64::INFINITY, f64::min);
        let start = greedy_init(&m, 2, 1).unwrap();
        let found = local_search(&m, 2, &start, 1000, seed);
        let got = oracle_logdet(&m, found.indices());
        let gap = got - optimum;
        worst_gap = worst_gap.max(gap);
        if gap <= 1e-9 {
            hits += 1;
        }
    }
    verdict(
        4,
        "greedy + local search vs exhaustive logdet",
        hits >= 19,
        format!("{hits}/20 within 1e-9 of the 8! optimum, worst gap {worst_gap:.3e}"),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

fn mixture(n: usize, d: usize, components: usize, rng: &mut ChaCha8Rng) -> pqf::layout::SubvectorMatrix {
    let centres = gaussian(components, d, rng);
    let scales: Vec<f64> = (0..components).map(|_| rng.gen_range(0.2..0.6)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.gen_range(0..components);
        for a in 0..d {
            data.push(centres[[c, a]] * 2.0 + scales[c] * normal(rng));
        }
    }
    pqf::layout::SubvectorMatrix::from_vectors(d, data)
}

#[test]
fn criterion_05_src_vs_kmeans() {
    let t = Instant::now();
    let mut src_e = Vec::new();
    let mut km_e = Vec::new();
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let s = mixture(1024, 4, 16, &mut rng);
        let stats = subvector_covariance(&s).unwrap();
        let km = kmeans(&s, 64, 1000, seed);
        let sr = src(&s, &stats, 64, &SrcConfig { iterations: 1000, gamma: 0.5, seed }).unwrap();
        if sr.error < km.error {
            wins += 1;
        }
        src_e.push(sr.error);
        km_e.push(km.error);
    }
    let ms = pqf::bench::median(&mut src_e);
    let mk = pqf::bench::median(&mut km_e);
    verdict(
        5,
        "SR-C vs k-means",
        ms <= mk && wins >= 14,
        format!("median E_t SR-C {ms:.5} vs k-means {mk:.5}, SR-C wins {wins}/20 (need 14)"),
        t.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_06_ablation_direction() {
    let t = Instant::now();
    let cfg = BenchConfig { generator: Generator::Anisotropic, seeds: 20, ..Default::default() };
    let rows = run_bench(&cfg).unwrap();
    let med = median_errors(&rows);
    let get = |m: Method| med.iter().find(|(x, _)| *x == m).unwrap().1;
    let (km, sr, ps) = (get(Method::Kmeans), get(Method::Src), get(Method::PermSrc));
    verdict(
        6,
        "ablation ordering perm+SR-C <= SR-C <= k-means",
        ps <= sr && sr <= km,
        format!("median E_t perm+src {ps:.5}, src {sr:.5}, kmeans {km:.5}"),
        t.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_07_rate_distortion_sanity() {
    let t = Instant::now();
    let mut worst = f64::INFINITY;
    let mut cases = Vec::new();
    for (ci, (d, k)) in [(2usize, 16usize), (2, 64), (4, 16), (4, 64)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + ci as u64);
        let mix = gaussian(d, d, &mut rng);
        let n = 100 * k;
        let z = gaussian(n, d, &mut rng);
        let x = z.dot(&mix.t());
        let s = pqf::layout::SubvectorMatrix::from_vectors(d, x.iter().copied().collect());
        let centred = DMatrix::from_fn(n, d, |i, a| x[[i, a]] - x.column(a).mean().unwrap());
        let sigma = centred.transpose() * &centred / n as f64;
        let bound = (k as f64).powf(-2.0 / d as f64) * d as f64 * sigma.determinant().powf(1.0 / d as f64);
        let library = rd_lower_bound(&subvector_covariance(&s).unwrap(), k, d);
        assert!((library - bound).abs() <= 1e-9 * bound, "bound {library} vs oracle {bound}");
        let q = kmeans(&s, k, 1000, ci as u64);
        let ratio = q.error / bound;
        worst = worst.min(ratio);
        cases.push(format!("d={d},k={k}: {ratio:.3}"));
    }
    verdict(
        7,
        "k-means distortion vs Gaussian rate-distortion bound",
        worst >= 0.9,
        format!("E_t / bound: {} (need >= 0.9)", cases.join(", ")),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

fn loss(net: &ToyNetwork, x: &Array2<f64>, y: &[usize]) -> f64 {
    softmax_cross_entropy(&net.logits(x).unwrap(), y).0
}

/// Sign pattern of every relu input, to detect stencils that straddle a kink.
fn relu_pattern(net: &ToyNetwork, x: &Array2<f64>) -> Vec<bool> {
    let cache = net.forward(x).unwrap();
    net.nodes
        .iter()
        .filter(|n| matches!(n.op, pqf::finetune::ToyOp::Relu))
        .flat_map(|n| cache.node(n.inputs[0]).iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

fn random_config(seed: u64) -> (ToyNetwork, Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
    let net = match seed % 4 {
        0 => {
            let sizes: Vec<usize> = (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(2..=7)).collect();
            pqf::finetune::mlp(&sizes, seed)
        }
        1 => pqf::finetune::conv_net(rng.gen_range(1..=2), [2, 4][rng.gen_range(0..2)], rng.gen_range(2..=4), 3, seed),
        2 => residual_net(seed),
        _ => pqf::finetune::concat_net(seed),
    };
    let batch = rng.gen_range(1..=4);
    let x = gaussian(batch, net.input_shape().width(), &mut rng);
    let classes = net.nodes[net.primary_output()].shape.width();
    let y = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (net, x, y)
}

#[test]
fn criterion_08_gradient_suite() {
    let t = Instant::now();
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for seed in 0..50u64 {
        let (mut net, x, y) = random_config(seed);
        // quantize one weighted layer so centroid gradients are exercised too
        let ckpt = net.to_checkpoint();
        let target = ckpt.layers.iter().rfind(|l| l.kind.has_weight_matrix()).unwrap().clone();
        let g = Geometry::of(&target);
        let d = if target.kind == LayerKind::Fc { [1, 2].into_iter().rev().find(|d| g.rows().is_multiple_of(*d)).unwrap() } else { g.kernel_area() };
        let cfg = LayerCompressionConfig { quantizer: Quantizer::Kmeans, iterations: 10, k: 3, k_fc: 3, d_fc: d, d_pw: d, ..Default::default() };
        let perm = Permutation::identity(g.rows(), g.kernel_area());
        let enc = encode_layer(ckpt.tensor(&target.weight_name()).unwrap(), &target, &cfg, &perm, seed).unwrap();
        net.set_encoding(enc).unwrap();

        let base = relu_pattern(&net, &x);
        let cache = net.forward(&x).unwrap();
        let (_, dl) = softmax_cross_entropy(cache.node(net.primary_output()), &y);
        let grads = net.backward(&cache, &dl);
        let mut probe = |net: &mut ToyNetwork, set: &mut dyn FnMut(&mut ToyNetwork, f64), analytic: f64| {
            set(net, h);
            let (up, pu) = (loss(net, &x, &y), relu_pattern(net, &x));
            set(net, -h);
            let (down, pd) = (loss(net, &x, &y), relu_pattern(net, &x));
            set(net, 0.0);
            if pu != base || pd != base {
                skipped += 1;
                return;
            }
            checked += 1;
            worst = worst.max(rel(analytic, (up - down) / (2.0 * h)));
        };
        for i in 0..net.nodes.len() {
            let Some(lg) = grads.layers[i].clone() else { continue };
            match net.weight_source(i).cloned() {
                Some(WeightSource::Raw(w)) => {
                    for ((r, c), &orig) in w.indexed_iter() {
                        let mut set = |n: &mut ToyNetwork, dv: f64| {
                            if let Some(WeightSource::Raw(m)) = n.weight_source_mut(i) {
                                m[[r, c]] = orig + dv;
                            }
                        };
                        probe(&mut net, &mut set, lg.weight[[r, c]]);
                    }
                }
                Some(WeightSource::Encoded(e)) => {
                    let cg = centroid_gradients(&lg.weight, &e);
                    for ((tt, a), &orig) in e.codebook.centroids.indexed_iter() {
                        let mut set = |n: &mut ToyNetwork, dv: f64| {
                            if let Some(WeightSource::Encoded(m)) = n.weight_source_mut(i) {
                                m.codebook.centroids[[tt, a]] = orig + dv;
                            }
                        };
                        probe(&mut net, &mut set, cg[[tt, a]]);
                    }
                }
                None => {}
            }
            if let Some(gb) = lg.bias {
                for o in 0..gb.len() {
                    let orig = net.bias_mut(i).unwrap()[o];
                    let mut set = |n: &mut ToyNetwork, dv: f64| n.bias_mut(i).unwrap()[o] = orig + dv;
                    probe(&mut net, &mut set, gb[o]);
                }
            }
        }
    }
    verdict(
        8,
        "analytic vs central-difference gradients",
        worst <= 1e-5 && checked > 0,
        format!("50 configs, {checked} coordinates, worst relative error {worst:.2e} (tol 1e-5), {skipped} skipped at relu kinks"),
        t.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_09_finetune_recovery() {
    let t = Instant::now();
    let mut improved = 0;
    let mut preserved = true;
    let mut setup_ok = 0;
    let mut lines = Vec::new();
    for seed in 0..20u64 {
        let out = recovery_experiment(&RecoveryConfig::new(ToyKind::Mlp, seed)).unwrap();
        preserved &= out.structure_preserved;
        if out.finetuned_val_acc > out.quantized_val_acc {
            improved += 1;
        }
        if out.raw_val_acc >= 0.95 && out.quantized_val_acc <= 0.80 {
            setup_ok += 1;
        }
        lines.push(format!("{:.2}/{:.2}/{:.2}", out.raw_val_acc, out.quantized_val_acc, out.finetuned_val_acc));
    }
    verdict(
        9,
        "fine-tuning recovers accuracy with codes frozen",
        improved >= 18 && preserved,
        format!(
            "improved {improved}/20 (need 18), structure preserved {preserved}, degraded setups {setup_ok}/20; raw/quantized/finetuned {}",
            lines.join(" ")
        ),
        t.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_10_round_trips() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // bit packing for every codebook size
    let mut pack_ok = true;
    for k in 2..=4096usize {
        let count = rng.gen_range(1..40);
        let mut codes: Vec<u32> = (0..count).map(|_| rng.gen_range(0..k as u32)).collect();
        codes[0] = k as u32 - 1;
        let bits = code_bits(k);
        pack_ok &= bits == (usize::BITS - (k - 1).leading_zeros());
        let packed = pack_codes(&codes, bits);
        pack_ok &= packed.len() == (count * bits as usize).div_ceil(8);
        pack_ok &= unpack_codes(&packed, bits, count).unwrap() == codes;
    }
    // container and error recomputation on a compressed toy model
    let net = pqf::finetune::conv_net(2, 4, 8, 4, 3);
    let ckpt = net.to_checkpoint();
    let cfg = LayerCompressionConfig { skip_first: false, k: 8, iterations: 30, perm_iters: 100, ..Default::default() };
    let outcome = pqf::codec::compress_model(&ckpt, &cfg).unwrap();
    let bytes = compressed_to_bytes(&outcome.model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pqfc");
    save_compressed(&outcome.model, &path).unwrap();
    let from_disk = load_compressed(&path).unwrap();
    let container_ok = std::fs::read(&path).unwrap() == bytes
        && from_disk == outcome.model
        && compressed_to_bytes(&compressed_from_bytes(&bytes).unwrap()).unwrap() == bytes;
    let mut worst = 0.0f64;
    for enc in &outcome.encodings {
        let meta = ckpt.layer(&enc.name).unwrap();
        let w = ckpt.tensor(&meta.weight_name()).unwrap();
        worst = worst.max((quantization_error(w, enc).unwrap() - enc.error).abs());
        // direct definition: mean squared distance of permuted subvectors to their centroids
        let original = pqf::layout::reshape_record(w, meta).unwrap();
        let permuted = enc.permutation.apply_rows(&original.matrix);
        let s = split_matrix(&permuted, enc.d, Geometry::of(meta)).unwrap();
        let mut sum = 0.0;
        for (idx, v) in s.iter().enumerate() {
            let c = enc.codebook.centroid(enc.codes.assignments[idx] as usize);
            sum += v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        worst = worst.max((sum / s.len() as f64 - enc.error).abs());
        let decoded = enc.decode_matrix();
        let direct = (&decoded - &original.matrix).iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        worst = worst.max((direct - enc.error).abs());
    }
    let stand_alone = {
        let meta = LayerMeta::new("fc", LayerKind::Fc, 1, 16, 8);
        let values: Vec<f64> = (0..128).map(|_| normal(&mut rng) as f32 as f64).collect();
        let w = TensorRecord::from_f64("fc.weight", vec![16, 8], &values);
        let e = encode_layer(&w, &meta, &LayerCompressionConfig { k_fc: 8, ..Default::default() }, &Permutation::identity(16, 1), 1).unwrap();
        (quantization_error(&w, &e).unwrap() - e.error).abs()
    };
    worst = worst.max(stand_alone);
    verdict(
        10,
        "container, bit-packing and error round trips",
        pack_ok && container_ok && worst <= 1e-10,
        format!("packing k=2..4096 exact: {pack_ok}, container bit-exact: {container_ok}, {} layers, max |E_t - recomputed| {worst:.2e}", outcome.encodings.len()),
        t.elapsed(),
        Duration::from_secs(30),
    );
}
