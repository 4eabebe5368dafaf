use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use cuside_array::asr::cer;
use cuside_array::beamformer::{enhance_chunk, MaskNet, MaskSource};
use cuside_array::chunking::ContextMode;
use cuside_array::cuside::{simulate_future, Model, ModelConfig, Trainer, Utterance};
use cuside_array::neural::{Tape, Tensor};
use cuside_array::scene::{oracle_irm, read_manifest, synth_dataset, ArrayGeometry, DatasetRecipe};
use cuside_array::signal::{istft, read_wav, si_sdr, snr_db, stft, write_wav, Waveform};
use cuside_array::streamer::{
    decode_utterance, enhance_stream, latency_report, stream_decode, Aggregate, StreamConfig, StreamMasks,
};
use cuside_array::verify::{self, Fault};

use crate::options::*;
use crate::Failure;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn json_line<T: Serialize>(w: &mut impl Write, path: &Path, v: &T) -> Result<(), Failure> {
    let s = serde_json::to_string(v).map_err(|e| Failure::Usage(e.to_string()))?;
    writeln!(w, "{s}").map_err(|e| io_err(path, e))
}

fn preset_config(p: Preset) -> ModelConfig {
    match p {
        Preset::Toy => ModelConfig::toy(),
        Preset::Paper => ModelConfig::paper(),
    }
}

// ------------------------------------------------------------------- data

/// One recording with its transcript and, when known, the clean images.
struct Item {
    id: String,
    mixture: Waveform,
    speech: Option<Waveform>,
    tokens: Vec<u32>,
}

fn load_items(d: &DataOptions) -> Result<Vec<Item>, Failure> {
    match &d.dir {
        Some(dir) => {
            let m = read_manifest(dir)?;
            m.records
                .iter()
                .map(|r| {
                    Ok(Item {
                        id: r.id.clone(),
                        mixture: read_wav(m.path(&r.mixture_path))?,
                        speech: Some(read_wav(m.path(&r.speech_path))?),
                        tokens: r.tokens()?,
                    })
                })
                .collect()
        }
        None => {
            if d.synth == 0 {
                return Err(Failure::Usage("no data: give a dataset directory or a synthetic count".into()));
            }
            let recipe = DatasetRecipe {
                num_utterances: d.synth,
                seed: d.seed,
                ..Default::default()
            };
            Ok(recipe
                .scenes()?
                .into_iter()
                .map(|s| Item {
                    id: s.spec.id.clone(),
                    mixture: s.mixture,
                    speech: Some(s.speech_image),
                    tokens: s.spec.transcript,
                })
                .collect())
        }
    }
}

fn utterances(items: &[Item], cfg: &ModelConfig) -> Result<Vec<Utterance>, Failure> {
    items
        .iter()
        .map(|it| Ok(Utterance::from_waveform(it.id.clone(), &it.mixture, it.tokens.clone(), cfg)?))
        .collect()
}

// --------------------------------------------------------------- simulate

pub fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let (o, out) = args.resolve()?;
    log_resolved("simulate", &o);
    if !(o.snr_low <= o.snr_high) || o.n == 0 || o.mics == 0 || !(o.spacing > 0.0) {
        return Err(Failure::Usage("need n > 0, mics > 0, spacing > 0 and snr_low <= snr_high".into()));
    }
    let recipe = DatasetRecipe {
        num_utterances: o.n,
        seed: o.seed,
        snr_db: (o.snr_low, o.snr_high),
        diffuse_db: o.diffuse_db,
        directional_noise: o.directional,
        geometry: ArrayGeometry::uniform_linear(o.mics, o.spacing),
        ..Default::default()
    };
    let manifest = synth_dataset(&recipe.scene_specs(), &out)?;
    println!("wrote {} utterances to {}", manifest.records.len(), out.display());
    if o.audit_snr {
        let mut worst = 0.0f64;
        for r in &manifest.records {
            let s = read_wav(manifest.path(&r.speech_path))?;
            let n = read_wav(manifest.path(&r.noise_path))?;
            let measured = snr_db(s.channel(0), n.channel(0))?;
            let err = (measured - r.snr_db).abs();
            worst = worst.max(err);
            if err > 0.1 {
                return Err(Failure::Verification(format!(
                    "{}: measured SNR {measured:.3} dB, requested {:.3} dB",
                    r.id, r.snr_db
                )));
            }
        }
        println!("SNR audit passed: worst deviation {worst:.4} dB");
    }
    Ok(())
}

// ------------------------------------------------------------------ train

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let (o, out) = args.resolve()?;
    log_resolved("train", &o);
    let train_items = load_items(&o.data)?;
    let val_items = load_items(&o.val)?;
    let mut trainer = if o.resume {
        Trainer::resume(&out, Some(o.training.clone()))?
    } else {
        let cfg = preset_config(o.model);
        let train = utterances(&train_items, &cfg)?;
        let model = Model::new(cfg, o.training.seed)?.with_estimated_norm(train.iter().map(|u| &u.spec))?;
        Trainer::new(model, o.training.clone(), Some(out.clone()))?
    };
    let cfg = trainer.model.config.clone();
    let train = utterances(&train_items, &cfg)?;
    let val = utterances(&val_items, &cfg)?;
    let opts_path = out.join("options.json");
    let text = serde_json::to_string_pretty(&o).map_err(|e| Failure::Usage(e.to_string()))?;
    std::fs::write(&opts_path, text).map_err(|e| io_err(&opts_path, e))?;

    let open = |name: &str| -> Result<BufWriter<File>, Failure> {
        let p = out.join(name);
        std::fs::OpenOptions::new()
            .create(true)
            .append(o.resume)
            .write(true)
            .truncate(!o.resume)
            .open(&p)
            .map(BufWriter::new)
            .map_err(|e| io_err(&p, e))
    };
    let mut metrics = open("metrics.jsonl")?;
    let mut val_log = open("val.jsonl")?;
    let started = Instant::now();
    let summary = trainer.run(&train, &val, &mut metrics, &mut val_log)?;
    metrics.flush().map_err(|e| io_err(&out, e))?;
    val_log.flush().map_err(|e| io_err(&out, e))?;
    let best = summary
        .history
        .iter()
        .map(|v| v.l_total)
        .fold(f64::INFINITY, f64::min);
    println!(
        "trained {} steps in {:.1} s; initial val {:.3}, best val {:.3}; final model {}",
        summary.steps,
        started.elapsed().as_secs_f64(),
        summary.initial.l_total,
        best,
        out.join("final.ckpt").display()
    );
    Ok(())
}

// ------------------------------------------------------------------- eval

#[derive(Serialize)]
struct ReportRow {
    system: String,
    latency: String,
    cer: f64,
    si_sdr_db: Option<f64>,
}

#[derive(Serialize)]
struct Hypothesis<'a> {
    id: &'a str,
    system: &'a str,
    hyp: Vec<u32>,
    #[serde(rename = "ref")]
    reference: &'a [u32],
}

fn whole_utterance_enhance(model: &Model, mixture: &Waveform) -> Result<Waveform, Failure> {
    let spec = stft(mixture, &model.config.stft)?;
    let source = MaskSource::Network {
        params: &model.params,
        config: &model.config.mask,
    };
    let e = enhance_chunk(&spec, 0..spec.num_frames(), source, &model.config.mvdr)?;
    Ok(istft(&e.spectrum, mixture.sample_rate(), Some(mixture.len()))?)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (o, model_path) = args.resolve()?;
    log_resolved("eval", &o);
    let model = Model::load(&model_path)?;
    let items = load_items(&o.data)?;
    let refch = model.config.mvdr.reference_channel;
    let mut hyp_out = match &o.hyp_out {
        Some(p) => Some((create(p)?, p.clone())),
        None => None,
    };
    let mut rows = Vec::new();

    let systems: [(&str, Option<ContextMode>); 4] = [
        ("non-streaming", None),
        ("none", Some(ContextMode::None)),
        ("real", Some(ContextMode::Real)),
        ("simulated", Some(ContextMode::Simulated)),
    ];
    for (name, mode) in systems {
        let mut hyps = Vec::with_capacity(items.len());
        let mut sdrs = Vec::new();
        let mut sim_ms = Vec::new();
        let scfg = mode.map(|m| StreamConfig::for_model(&model.config, m));
        for it in &items {
            let hyp = match &scfg {
                None => {
                    let spec = stft(&it.mixture, &model.config.stft)?;
                    decode_utterance(&model, &spec)?.ids().to_vec()
                }
                Some(c) => {
                    let out = stream_decode(&it.mixture, &model, c)?;
                    sim_ms.extend(out.events.iter().filter_map(|e| e.sim_compute_ms));
                    out.transcript.ids().to_vec()
                }
            };
            if o.sisdr {
                if let Some(s) = &it.speech {
                    let est = match &scfg {
                        None => whole_utterance_enhance(&model, &it.mixture)?,
                        Some(c) => enhance_stream(&it.mixture, &model.config, c, StreamMasks::Network(&model))?.waveform,
                    };
                    sdrs.push(si_sdr(s.channel(refch), est.channel(0))?);
                }
            }
            if let Some((w, p)) = hyp_out.as_mut() {
                json_line(
                    w,
                    p,
                    &Hypothesis {
                        id: &it.id,
                        system: name,
                        hyp: hyp.clone(),
                        reference: &it.tokens,
                    },
                )?;
            }
            hyps.push(hyp);
        }
        let c = cer(hyps.iter().map(|h| &h[..]).zip(items.iter().map(|i| &i.tokens[..])))?;
        let latency = match &scfg {
            None => "full utterance".to_string(),
            Some(cfg) if cfg.mode == ContextMode::Simulated => format!(
                "{:.0} ms + {:.2} ms simulator",
                cfg.algorithmic_latency_ms(),
                mean(&sim_ms).unwrap_or(0.0)
            ),
            Some(cfg) => format!("{:.0} ms", cfg.algorithmic_latency_ms()),
        };
        rows.push(ReportRow {
            system: name.to_string(),
            latency,
            cer: c,
            si_sdr_db: mean(&sdrs),
        });
    }
    if let Some((mut w, p)) = hyp_out {
        w.flush().map_err(|e| io_err(&p, e))?;
    }

    println!("{} test utterances, model {}", items.len(), model_path.display());
    println!("{:<14} {:<28} {:>8} {:>10}", "system", "latency", "CER %", "SI-SDR dB");
    for r in &rows {
        let sdr = r.si_sdr_db.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!("{:<14} {:<28} {:>8.2} {:>10}", r.system, r.latency, 100.0 * r.cer, sdr);
    }
    if let Some(p) = &o.csv {
        let mut w = create(p)?;
        let mut put = |s: String| writeln!(w, "{s}").map_err(|e| io_err(p, e));
        put("system,latency,cer,si_sdr_db".into())?;
        for r in &rows {
            let sdr = r.si_sdr_db.map(|v| v.to_string()).unwrap_or_default();
            put(format!("{},{},{},{}", r.system, r.latency, r.cer, sdr))?;
        }
        w.flush().map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- enhance

pub fn enhance(args: EnhanceArgs) -> Result<(), Failure> {
    let o = args.resolve()?;
    log_resolved("enhance", &o);
    let input = o.input.clone().expect("resolved");
    let output = o.output.clone().expect("resolved");
    let mixture = read_wav(&input)?;
    let mode: ContextMode = o.mode.unwrap_or(Mode::None).into();
    let model = o.model.as_ref().map(Model::load).transpose()?;
    let model_cfg = model.as_ref().map(|m| m.config.clone()).unwrap_or_else(ModelConfig::toy);
    let cfg = StreamConfig::for_model(&model_cfg, mode);
    let result = match &model {
        Some(m) => enhance_stream(&mixture, &model_cfg, &cfg, StreamMasks::Network(m))?,
        None => {
            let s = read_wav(o.speech.as_ref().expect("resolved"))?;
            let n = read_wav(o.noise.as_ref().expect("resolved"))?;
            let (sm, nm) = oracle_irm(
                &stft(&s, &model_cfg.stft)?,
                &stft(&n, &model_cfg.stft)?,
                model_cfg.mvdr.reference_channel,
            )?;
            enhance_stream(&mixture, &model_cfg, &cfg, StreamMasks::Oracle { speech: &sm, noise: &nm })?
        }
    };
    write_wav(&output, &result.waveform)?;
    println!(
        "wrote {} ({} samples, {} fallback bins)",
        output.display(),
        result.waveform.len(),
        result.fallback_bins
    );
    if let Some(sp) = &o.speech {
        let s = read_wav(sp)?;
        let r = model_cfg.mvdr.reference_channel;
        let before = si_sdr(s.channel(r), mixture.channel(r))?;
        let after = si_sdr(s.channel(r), result.waveform.channel(0))?;
        println!("SI-SDR {before:.2} dB -> {after:.2} dB");
    }
    Ok(())
}

// ----------------------------------------------------------------- stream

pub fn stream(args: StreamArgs) -> Result<(), Failure> {
    let o = args.resolve()?;
    log_resolved("stream", &o);
    let model = Model::load(o.model.as_ref().expect("resolved"))?;
    let mixture = read_wav(o.input.as_ref().expect("resolved"))?;
    let mut cfg = StreamConfig::for_model(&model.config, o.mode.unwrap_or(Mode::Simulated).into());
    if let Some(v) = o.chunk_ms {
        cfg.chunk_ms = v;
    }
    if let Some(v) = o.left_ctx_ms {
        cfg.left_ctx_ms = v;
    }
    if let Some(v) = o.right_ctx_ms {
        cfg.right_ctx_ms = v;
    }
    cfg.check_model(&model.config)?;
    let out = stream_decode(&mixture, &model, &cfg)?;
    if let Some(p) = &o.events {
        let mut w = create(p)?;
        for e in &out.events {
            json_line(&mut w, p, e)?;
        }
        w.flush().map_err(|e| io_err(p, e))?;
    }
    if out.short_input {
        eprintln!("warning: input shorter than one chunk; padded with silence");
    }
    let ids: Vec<String> = out.transcript.ids().iter().map(|t| t.to_string()).collect();
    println!("transcript: {}", ids.join(" "));
    let report = latency_report(&out.events, &cfg).map_err(|e| Failure::Verification(e.to_string()))?;
    println!("{report}");
    Ok(())
}

// ------------------------------------------------------------------ bench

#[derive(Serialize)]
struct StageTiming {
    stage: String,
    median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64() * 1e3)
}

/// Concatenated toy scenes trimmed to `seconds`.
fn workload(o: &BenchOptions) -> Result<Waveform, Failure> {
    let sr = 16_000usize;
    let want = (o.seconds * sr as f64).round() as usize;
    let mut chans = vec![Vec::with_capacity(want); o.mics];
    let mut index = 0;
    while chans[0].len() < want {
        let recipe = DatasetRecipe {
            num_utterances: 1,
            seed: o.seed.wrapping_add(index),
            geometry: ArrayGeometry::uniform_linear(o.mics, 0.05),
            ..Default::default()
        };
        let scene = recipe.scenes()?.remove(0);
        for (c, src) in chans.iter_mut().zip(scene.mixture.channels()) {
            c.extend_from_slice(src);
        }
        index += 1;
    }
    for c in &mut chans {
        c.truncate(want);
    }
    Ok(Waveform::new(chans, sr as u32)?)
}

pub fn bench(args: BenchArgs) -> Result<(), Failure> {
    let o = args.resolve()?;
    log_resolved("bench", &o);
    let model = match &o.model {
        Some(p) => Model::load(p)?,
        None => Model::new(preset_config(o.preset), o.seed)?,
    };
    let cfg = &model.config;
    let wave = workload(&o)?;
    let mut stages: Vec<(String, Vec<f64>)> = Vec::new();
    let mut record = |name: &str, ms: f64| match stages.iter_mut().find(|(n, _)| n == name) {
        Some((_, v)) => v.push(ms),
        None => stages.push((name.to_string(), vec![ms])),
    };
    let refch = cfg.mvdr.reference_channel;
    for _ in 0..o.repeats {
        let (spec, ms) = timed(|| stft(&wave, &cfg.stft));
        let spec = spec?;
        record("stft", ms);
        let (masks, ms) = timed(|| MaskNet::new(&cfg.mask).masks(&model.params, &spec, refch));
        let (sm, nm) = masks?;
        record("mask_net", ms);
        let (enh, ms) = timed(|| {
            enhance_chunk(
                &spec,
                0..spec.num_frames(),
                MaskSource::Oracle { speech: &sm, noise: &nm },
                &cfg.mvdr,
            )
        });
        let enh = enh?;
        record("mvdr", ms);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let power = Tensor::from_vec(enh.spectrum.num_frames(), enh.spectrum.num_bins(), enh.spectrum.power(0))?;
        let p = tape.constant(power);
        let (feats, ms) = timed(|| model.features(&mut tape, p));
        let feats = feats?;
        record("features", ms);
        let (logits, ms) = timed(|| model.encode(&mut tape, &bound, feats, None));
        logits?;
        record("encoder", ms);
        let chunk = tape.value(feats).slice_rows(0, cfg.chunk_frames.min(spec.num_frames()));
        let x = tape.constant(chunk);
        let h = cfg.sim.zero_state().to_tape(&mut tape);
        let (sim, ms) = timed(|| simulate_future(&mut tape, &bound, &cfg.sim, x, &h));
        sim?;
        record("simulator_chunk", ms);
        for mode in ContextMode::ALL {
            let sc = StreamConfig::for_model(cfg, mode);
            let (out, ms) = timed(|| stream_decode(&wave, &model, &sc));
            let out = out?;
            record(&format!("stream_{}_total", mode.as_str()), ms);
            let per: Vec<f64> = out.events.iter().map(|e| e.compute_ms).collect();
            if let Some(a) = Aggregate::of(&per) {
                record(&format!("stream_{}_chunk", mode.as_str()), a.mean);
            }
        }
    }
    let timings: Vec<StageTiming> = stages
        .into_iter()
        .map(|(stage, v)| StageTiming {
            stage,
            median_ms: median(v),
        })
        .collect();
    println!(
        "{:.2} s, {} mics, {} repeats (median ms)",
        o.seconds, o.mics, o.repeats
    );
    for t in &timings {
        println!("{:<22} {:>10.3}", t.stage, t.median_ms);
    }
    if let Some(p) = &o.json {
        let mut w = create(p)?;
        let s = serde_json::to_string_pretty(&timings).map_err(|e| Failure::Usage(e.to_string()))?;
        w.write_all(s.as_bytes()).map_err(|e| io_err(p, e))?;
        w.flush().map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

// ----------------------------------------------------------------- verify

pub fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let o = args.resolve()?;
    log_resolved("verify", &o);
    let opts = verify::VerifyOptions {
        seed: o.seed,
        fault: o.inject_fault.map(|f| match f {
            FaultArg::Ctc => Fault::PerturbCtc,
        }),
    };
    let results = verify::run_checks(&opts, o.filter.as_deref());
    if results.is_empty() {
        return Err(Failure::Usage(format!("no check matches {:?}", o.filter)));
    }
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<16} {:>9.1} ms  {}", r.name, r.elapsed_ms, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed ({} registered)", results.len(), verify::registry().len());
    if passed != results.len() {
        return Err(Failure::Verification(format!("{} check(s) failed", results.len() - passed)));
    }
    Ok(())
}
