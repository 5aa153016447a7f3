use std::fs;
use std::io::Write;
use std::path::Path;

use d2s::container::{self, Sequence};
use d2s::metrics::EvalReport;
use d2s::noise::{NoiseModel, NoiseSpec};
use d2s::phantom::{generate_phantom, PhantomSpec};
use d2s::pipeline::{self, FrameStack, TrainConfig};
use d2s::{Error, Result};
use log::info;

use crate::{DenoiseArgs, EvaluateArgs, ExportArgs, NoiseKind, PhantomArgs, SimulateArgs};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        size: a.size,
        n_frames: a.frames,
        motion_amplitude: a.amplitude,
        motion_kind: a.motion.into(),
        contrast_drift: a.drift,
        seed: a.seed,
    };
    let ph = generate_phantom(&spec)?;
    let seq = Sequence {
        frames: ph.clean_frames,
        target_index: ph.target_index,
        clean: None,
        roi: Some(ph.roi_mask),
        fields: Some(ph.true_fields),
        noise: None,
    };
    container::write_sequence(&a.out, &seq)?;
    info!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let need =
        |v: Option<f64>, flag: &str| v.ok_or_else(|| invalid(format!("--{flag} is required for this noise kind")));
    let model = match a.noise {
        NoiseKind::Gaussian => NoiseModel::Gaussian {
            sigma: need(a.sigma, "sigma")?,
        },
        NoiseKind::Rician => NoiseModel::Rician {
            sigma: need(a.sigma, "sigma")?,
        },
        NoiseKind::Poisson => NoiseModel::Poisson {
            p_level: need(a.plevel, "plevel")?,
        },
    };
    let spec = NoiseSpec::new(model, a.seed)?;
    let src = container::read_sequence(&a.input)?;
    let clean = src.clean.clone().unwrap_or(src.frames);
    let seq = Sequence {
        frames: spec.apply_to_sequence(&clean)?,
        target_index: src.target_index,
        clean: Some(clean),
        roi: src.roi,
        fields: src.fields,
        noise: Some(spec),
    };
    container::write_sequence(&a.out, &seq)
}

fn effective_config(a: &DenoiseArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                detail: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        ablation => ablation,
        n_aux => n_aux,
        n_train => n_train,
        n_test => n_test,
        learning_rate => learning_rate,
        dropout_rate => dropout_rate,
        lambda_smooth => lambda_smooth,
        lambda_s => lambda_s,
        lambda_r => lambda_r,
        augment_rotations => augment_rotations,
        seed => seed,
        denoiser_width => net.denoiser_width,
        registration_width => net.registration_width,
    );
    cfg.validate()?;
    Ok(cfg)
}

fn method_label(cfg: &TrainConfig) -> String {
    match cfg.ablation {
        pipeline::Ablation::Full => "deformed2self".into(),
        pipeline::Ablation::NoSingle => "deformed2self/no_single".into(),
        pipeline::Ablation::NoRegistration => "deformed2self/no_registration".into(),
    }
}

pub fn denoise(a: DenoiseArgs) -> Result<()> {
    let cfg = effective_config(&a)?;
    let seq = container::read_sequence(&a.input)?;
    let aux = container::auxiliary_indices(seq.frames.len(), seq.target_index, cfg.n_aux)?;
    let mut stack = FrameStack::new(
        seq.frames[seq.target_index].clone(),
        aux.iter().map(|&k| seq.frames[k].clone()).collect(),
    );
    stack.clean = seq.clean.as_ref().map(|c| c[seq.target_index].clone());
    stack.roi = seq.roi.clone();

    fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let log_path = a.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    let mut rows = String::from("iteration,l_s,l_r,l_m,total\n");
    let mut state = pipeline::PipelineState::new(cfg)?;
    info!("training on {} auxiliary frames {:?}", aux.len(), aux);
    let fitted = state.fit(&stack, cfg.n_train, |r| {
        rows.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.iteration, r.loss_single, r.loss_registration, r.loss_multi, r.total
        ));
    });
    log.write_all(rows.as_bytes()).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    fitted?;

    pipeline::save_checkpoint(&state, &a.out.join("checkpoint.bin"))?;
    let estimate = pipeline::infer(&state, &stack, cfg.n_test, cfg.seed)?;
    container::write_raw(&a.out.join("denoised.raw"), &estimate)?;

    if let Some(clean) = &stack.clean {
        let mut report = EvalReport::evaluate(&estimate, clean, stack.roi.as_ref(), method_label(&cfg))?;
        report.noise_spec = seq.noise;
        report.seed = Some(cfg.seed);
        write_json(&a.out.join("report.json"), &report)?;
        println!("{}", serde_json::to_string(&report).expect("serializable"));
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let seq = container::read_sequence(&a.input)?;
    let (height, width) = seq.dim();
    let clean = seq
        .clean
        .as_ref()
        .ok_or_else(|| invalid(format!("{} has no clean reference frames", a.input.display())))?;
    let roi = if a.roi {
        Some(
            seq.roi
                .as_ref()
                .ok_or_else(|| invalid(format!("{} has no ROI", a.input.display())))?,
        )
    } else {
        None
    };
    let estimate = container::read_raw(&a.estimate, height, width)?;
    let mut report = EvalReport::evaluate(&estimate, &clean[seq.target_index], roi, a.method)?;
    report.noise_spec = seq.noise;
    report.seed = seq.noise.map(|n| n.seed);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

pub fn export_png(a: ExportArgs) -> Result<()> {
    let (height, width) = match (&a.like, a.height, a.width) {
        (_, Some(h), Some(w)) => (h, w),
        (Some(dir), None, None) => {
            let m = container::read_manifest(dir)?;
            (m.height, m.width)
        }
        _ => return Err(invalid("give --height and --width, or --like CONTAINER")),
    };
    let img = container::read_raw(&a.input, height, width)?;
    container::export_png(&img, &a.out)
}
