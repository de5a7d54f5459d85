use crate::{AuditArgs, BenchArgs, BenchTarget, DataArgs, EvalArgs, GenDataArgs, InferArgs, Split, SvnDemoArgs, TrainArgs};
use lrnnet::attention::{
    extract_keys, reduced_nonlocal, standard_nonlocal, svd_oracle, FeatureView, Matrix, Normalizer, SvnConfig,
};
use lrnnet::cost::{
    attention_flops, bench_latency, closer_convention, count_flops, reference_costs, relative_delta,
    standard_nonlocal_macs, Convention, REF_MULTI_SCALE, REF_POWER_MULTI, REF_POWER_SINGLE, REF_SINGLE_SCALE,
    REF_STANDARD_NONLOCAL,
};
use lrnnet::network::{build_lrnnet, network_forward, Checkpoint, Network, NetworkSpec};
use lrnnet::train::{
    evaluate_miou, gen_synthetic_dataset, predict, read_pnm, write_pgm, write_ppm, Sample, SynthConfig, TrainConfig,
    Trainer,
};
use lrnnet::{Error, Result, Shape4, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::time::Instant;

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn check_size(spec: &NetworkSpec, (h, w): (usize, usize)) -> Result<()> {
    let s = spec.output_stride();
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!("size {h}x{w} must be a positive multiple of {s}")));
    }
    Ok(())
}

fn giga(x: f64) -> String {
    format!("{:.3}G", x / 1e9)
}

fn mega(x: f64) -> String {
    format!("{:.2}M", x / 1e6)
}

fn pct(x: f64) -> String {
    format!("{:+.1}%", 100.0 * x)
}

pub fn audit(a: &AuditArgs) -> Result<()> {
    let spec = NetworkSpec::full_size(a.model, a.classes);
    check_size(&spec, a.size)?;
    let net = build_lrnnet(&spec, 0)?;
    let input = Shape4::new(1, spec.input_channels, a.size.0, a.size.1);
    let report = count_flops(&net, input, a.convention)?;
    let (ref_params, ref_gflops) = reference_costs(a.model);
    let params = report.total_params() as f64;
    let macs = report.total_macs();
    println!("model {}  input {input}  classes {}", a.model, a.classes);
    println!(
        "stages {:?} x blocks {:?}, last-stage dilations {:?}",
        spec.stage_channels, spec.blocks_per_stage, spec.stage3_dilations
    );
    println!(
        "classifier widths {}->{}->{} (3x3 conv, norm, relu, 1x1 conv, x{} bilinear)",
        spec.encoder_channels(),
        spec.classifier_channels,
        spec.num_classes,
        spec.output_stride()
    );
    if let Some(svn) = &spec.svn {
        let grids: Vec<String> = svn.scales.iter().map(|g| g.to_string()).collect();
        println!(
            "svn bottleneck {} channels, grids {}, power iterations {}",
            svn.bottleneck_channels,
            grids.join("+"),
            svn.power_iters
        );
    }
    println!(
        "params {:.0} ({:.4}M)  reference {ref_params}M  delta {}",
        params,
        params / 1e6,
        pct(relative_delta(params / 1e6, ref_params))
    );
    let overhead = macs - report.compute_macs();
    println!(
        "macs {} (conv and attention {}, elementwise overhead {})",
        giga(macs as f64),
        giga(report.compute_macs() as f64),
        giga(overhead as f64)
    );
    for c in Convention::BOTH {
        let v = c.apply(macs) as f64;
        let marker = if c == a.convention { " *" } else { "" };
        println!(
            "  {c:<8} {}  reference {ref_gflops} GFLOPS  delta {}{marker}",
            giga(v),
            pct(relative_delta(v / 1e9, ref_gflops))
        );
    }
    if a.size == (512, 1024) {
        let (best, d) = closer_convention(macs, ref_gflops * 1e9);
        println!("closer convention: {best} ({})", pct(d));
    }
    println!("total under {}: {}", a.convention, giga(report.total() as f64));
    if let Some(path) = &a.out {
        fs::write(path, report.to_csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn svn_demo(a: &SvnDemoArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let mut cfg = SvnConfig::new(a.channels, a.grids.0.clone());
    cfg.power_iters = a.power_iters;
    cfg.validate()?;
    let (h, w) = a.size;
    if h == 0 || w == 0 {
        return Err(Error::Config("feature size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let feat = Tensor4::random_uniform(Shape4::new(1, a.channels, h, w), 0.0, 1.0, &mut rng);
    let view = FeatureView::of(&feat, 0);
    println!(
        "random non-negative features {}x{h}x{w}, seed {}, T = {}",
        a.channels, a.common.seed, a.power_iters
    );
    let t0 = Instant::now();
    let bank = extract_keys(view, &cfg)?;
    let key_time = t0.elapsed().as_secs_f64();
    let mut all = Vec::new();
    let mut col = 0;
    for grid in &cfg.scales {
        println!("grid {grid}: |cos| of each key against the exact dominant singular vector");
        let bounds = grid.bounds(h, w);
        let mut scale_cos = Vec::with_capacity(bounds.len());
        for (k, b) in bounds.iter().enumerate() {
            let region = view.gather(b);
            let c = if b.pixels() == 0 {
                f64::NAN
            } else {
                let svd = svd_oracle(&region)?;
                cosine(&bank.column(col), &svd.left_vector(0)).abs()
            };
            col += 1;
            scale_cos.push(c);
            print!("{c:.5}");
            print!("{}", if (k + 1) % grid.cols == 0 { "\n" } else { " " });
        }
        let mut finite: Vec<f64> = scale_cos.iter().copied().filter(|c| c.is_finite()).collect();
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        println!("grid {grid}: {} keys, min {min:.6}, median {:.6}", finite.len(), median(&mut finite));
        all.extend(finite);
    }
    let min_all = all.iter().copied().fold(f64::INFINITY, f64::min);
    println!("all keys: {}, min |cos| {min_all:.6}, key extraction {:.2} ms", bank.len(), key_time * 1e3);

    let n = h * w;
    let cost = attention_flops(a.channels, n, &cfg.scales, cfg.power_iters);
    let conv = a.convention;
    let reference_shape = a.channels == 32 && (h, w) == (64, 128) && cfg.power_iters == 2;
    let show = |label: &str, macs: u64, reference: Option<f64>| {
        let v = conv.apply(macs) as f64;
        match reference.filter(|_| reference_shape) {
            Some(r) => println!("{label:<28} {:>10} {conv}  reference {:>10}  delta {}", mega(v), mega(r), pct(relative_delta(v, r))),
            None => println!("{label:<28} {:>10} {conv}", mega(v)),
        }
    };
    let keys = bank.len();
    let attention_ref = match keys {
        64 => Some(REF_SINGLE_SCALE),
        80 => Some(REF_MULTI_SCALE),
        _ => None,
    };
    let power_ref = match cfg.scales.len() {
        1 => Some(REF_POWER_SINGLE),
        2 => Some(REF_POWER_MULTI),
        _ => None,
    };
    show("reduced non-local", cost.attention_macs, attention_ref);
    show("power iteration", cost.power_iter_macs, power_ref);
    show("standard non-local", standard_nonlocal_macs(a.channels, n), Some(REF_STANDARD_NONLOCAL));

    let q = view.flattened();
    let t0 = Instant::now();
    let reduced = reduced_nonlocal(&q, &bank)?;
    let reduced_time = t0.elapsed().as_secs_f64();
    let via_standard = standard_nonlocal(&q, &bank.keys, &bank.keys, Normalizer::None)?;
    let diff = max_rel_diff(&reduced, &via_standard);
    println!("reduced vs generic operator with keys = values = bank: max relative difference {diff:.3e}");
    if keys == 1 {
        let key = bank.column(0);
        let worst = (0..n)
            .map(|i| reduced.column(i))
            .filter(|c| c.iter().any(|&v| v != 0.0))
            .map(|c| 1.0 - cosine(&c, &key).abs())
            .fold(0.0, f64::max);
        println!("single key: every output column is a multiple of it (max 1-|cos| {worst:.2e})");
    }
    println!("reduced non-local time {:.3} ms", reduced_time * 1e3);
    if !a.skip_standard {
        let t0 = Instant::now();
        let dense = standard_nonlocal(&q, &q, &q, Normalizer::None)?;
        let dense_time = t0.elapsed().as_secs_f64();
        std::hint::black_box(dense);
        println!(
            "standard non-local time {:.3} ms, ratio {:.0}x",
            dense_time * 1e3,
            dense_time / reduced_time.max(1e-9)
        );
    }
    Ok(())
}

fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let result = match a.target {
        BenchTarget::Model => {
            let spec = if a.toy {
                NetworkSpec::toy(a.model, 19)
            } else {
                NetworkSpec::full_size(a.model, 19)
            };
            let (h, w) = a.size.unwrap_or((256, 512));
            check_size(&spec, (h, w))?;
            let net = build_lrnnet(&spec, a.common.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
            let x = Tensor4::random_uniform(Shape4::new(1, 3, h, w), 0.0, 1.0, &mut rng);
            let label = format!("model {} forward 3x{h}x{w}", a.model);
            bench_latency(&label, a.reps, a.warmup, a.common.threads, || {
                std::hint::black_box(network_forward(&net, &x, false)?);
                Ok(())
            })?
        }
        BenchTarget::Attention => {
            let (h, w) = a.size.unwrap_or((64, 128));
            let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
            let feat = Tensor4::random_uniform(Shape4::new(1, 32, h, w), 0.0, 1.0, &mut rng);
            let view = FeatureView::of(&feat, 0);
            let cfg = SvnConfig::single_scale(32);
            let q = view.flattened();
            let label = format!("key extraction and reduced non-local 32x{h}x{w}");
            bench_latency(&label, a.reps, a.warmup, a.common.threads, || {
                let bank = extract_keys(view, &cfg)?;
                std::hint::black_box(reduced_nonlocal(&q, &bank)?);
                Ok(())
            })?
        }
    };
    println!(
        "{}: median {:.3} ms, mean {:.3} ms, p95 {:.3} ms ({} reps after {} warmup, {} threads)",
        result.label,
        result.median * 1e3,
        result.mean * 1e3,
        result.p95 * 1e3,
        result.reps,
        result.warmup,
        result.threads
    );
    Ok(())
}

fn synth_config(d: &DataArgs) -> SynthConfig {
    SynthConfig {
        height: d.size.0,
        width: d.size.1,
        num_classes: d.classes,
        train_size: d.train_size,
        val_size: d.val_size,
        seed: d.data_seed,
        ..SynthConfig::default()
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let spec = NetworkSpec::toy(a.model, a.data.classes);
    check_size(&spec, a.data.size)?;
    let data = gen_synthetic_dataset(&synth_config(&a.data))?;
    fs::create_dir_all(&a.out)?;
    let cfg = TrainConfig {
        base_lr: a.base_lr,
        max_iters: a.iters,
        batch_size: a.batch,
        seed: a.common.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.clone()),
        ..TrainConfig::default()
    };
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, Some(&spec), cfg)?,
        None => Trainer::new(build_lrnnet(&spec, a.common.seed)?, cfg)?,
    };
    println!(
        "training model {} ({} params) from iteration {} to {}",
        a.model,
        trainer.net.param_count(),
        trainer.iteration(),
        a.iters
    );
    let every = a.print_every;
    let log = trainer.run(&data.train, |r| {
        if every > 0 && r.iter % every == 0 {
            println!("iter {:5}  lr {:.5}  loss {:.5}", r.iter, r.lr, r.loss);
        }
    })?;
    let log_path = a.out.join("log.csv");
    fs::write(&log_path, log.to_csv())?;
    let ckpt = a.out.join("final.ckpt");
    trainer.save(&ckpt)?;
    if let (Some(first), Some(last)) = (log.initial_loss(), log.final_loss(20)) {
        println!("loss {first:.4} -> {last:.4} (ratio {:.3})", last / first);
    }
    let report = evaluate_miou(&trainer.net, &data.train)?;
    println!(
        "train pixel accuracy {:.4}, mIoU {:.4}",
        report.pixel_accuracy, report.mean_iou
    );
    println!("wrote {} and {}", log_path.display(), ckpt.display());
    Ok(())
}

fn load_network(path: &std::path::Path, expected: Option<&NetworkSpec>) -> Result<Network> {
    Network::from_checkpoint(&Checkpoint::load(path)?, expected)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let expected = a.model.map(|m| NetworkSpec::toy(m, a.data.classes));
    let net = match &a.checkpoint {
        Some(p) => load_network(p, expected.as_ref())?,
        None => {
            let spec = expected.unwrap_or_else(|| NetworkSpec::toy(lrnnet::network::ModelVariant::C, a.data.classes));
            build_lrnnet(&spec, a.common.seed)?
        }
    };
    if net.spec().num_classes != a.data.classes {
        return Err(Error::Config(format!(
            "network predicts {} classes but the data has {}",
            net.spec().num_classes,
            a.data.classes
        )));
    }
    check_size(net.spec(), a.data.size)?;
    let data = gen_synthetic_dataset(&synth_config(&a.data))?;
    let samples = match a.split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let report = evaluate_miou(&net, samples)?;
    println!("class  IoU");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("{c:5}  {v:.4}"),
            None => println!("{c:5}  absent"),
        }
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}  ({} images)", report.mean_iou, report.pixel_accuracy, samples.len());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    set_threads(a.common.threads)?;
    let expected = a.model.map(|m| NetworkSpec::toy(m, a.classes));
    let net = load_network(&a.checkpoint, expected.as_ref())?;
    let img = read_pnm(&a.input)?;
    if img.channels != 3 {
        return Err(Error::Data(format!("{} is not an RGB (P6) image", a.input.display())));
    }
    check_size(net.spec(), (img.height, img.width))?;
    let sample = Sample::from_interleaved(img.height, img.width, &img.data, vec![0; img.height * img.width])?;
    let labels = predict(&net, &sample)?;
    write_pgm(&a.out, img.width, img.height, &labels)?;
    println!("wrote {}x{} label map to {}", img.height, img.width, a.out.display());
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let data = gen_synthetic_dataset(&synth_config(&a.data))?;
    fs::create_dir_all(&a.out)?;
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        for (i, s) in samples.iter().enumerate() {
            write_ppm(&a.out.join(format!("{split}_{i:04}.ppm")), s.width, s.height, &s.interleaved())?;
            write_pgm(&a.out.join(format!("{split}_{i:04}.pgm")), s.width, s.height, &s.mask)?;
        }
    }
    println!(
        "wrote {} train and {} val scenes to {}",
        data.train.len(),
        data.val.len(),
        a.out.display()
    );
    Ok(())
}
