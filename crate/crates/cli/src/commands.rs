use std::io::Write;
use std::path::Path;

use fpq_core::block::DiTBlockWeights;
use fpq_core::error::{Error, Result};
use fpq_core::fusion::{fuse_block, FusionPlan, VMode};
use fpq_core::gptq::{gptq_quantize_with_format, rtn_quantize, CalibrationSet, GptqConfig};
use fpq_core::hadamard::{orthogonality_error, HadamardSpec};
use fpq_core::harness::{estimate_cost, run, HarnessConfig};
use fpq_core::io::{read_tensors, write_tensors, TensorMap};
use fpq_core::quantizer::quant_error;
use fpq_core::selector::{select_for_spread, spread_indicator, FormatPolicy, SelectionConfig};
use fpq_core::tensor::{channel_max_median_ratio, kurtosis, Tensor};
use serde_json::{json, Value};

use crate::{
    CostArgs, FuseArgs, HadamardArgs, InspectArgs, Overrides, QuantizeArgs, SelectArgs,
    SimulateArgs,
};

/// Dense matrices are only materialized up to this order unless written out.
const DENSE_LIMIT: usize = 1024;

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::String(v.to_string())
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn emit(json: bool, v: &Value, human: impl FnOnce() -> String) -> Result<()> {
    if json {
        print_json(v)
    } else {
        print!("{}", human());
        Ok(())
    }
}

fn load(path: &Path) -> Result<TensorMap<f64>> {
    read_tensors(path)
}

fn save(path: &Path, map: &TensorMap<f64>) -> Result<()> {
    let narrowed: TensorMap<f32> = map.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
    write_tensors(path, &narrowed)
}

fn tensor_stats(t: &Tensor<f64>, alpha: f64) -> Result<Value> {
    let spread = match spread_indicator(t, alpha) {
        Ok(s) => num(s),
        Err(Error::Data(_)) => Value::Null,
        Err(e) => return Err(e),
    };
    Ok(json!({
        "max_abs": num(t.max_abs()),
        "channel_max_median_ratio": num(channel_max_median_ratio(t)),
        "spread": spread,
        "kurtosis": num(kurtosis(t)),
    }))
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let map = load(&a.path)?;
    let mut rows = Vec::new();
    for (name, t) in &map {
        let mut entry = json!({ "name": name, "shape": t.shape() });
        if a.stats {
            entry["stats"] = tensor_stats(t, a.alpha)?;
        }
        rows.push(entry);
    }
    let v = json!({ "count": map.len(), "tensors": rows });
    emit(a.json, &v, || {
        let mut s = format!("{} tensors\n", map.len());
        for e in &rows {
            s += &format!(
                "{:<24} {:?}",
                e["name"].as_str().unwrap_or(""),
                map[e["name"].as_str().unwrap_or("")].shape()
            );
            if let Some(st) = e.get("stats") {
                s += &format!(
                    "  max {}  max/median {}  spread {}  kurtosis {}",
                    st["max_abs"], st["channel_max_median_ratio"], st["spread"], st["kurtosis"]
                );
            }
            s += "\n";
        }
        s
    })
}

pub fn hadamard(a: HadamardArgs) -> Result<()> {
    let spec = HadamardSpec::build(a.n, a.seed)?;
    let ops = spec.op_count(a.rows, a.n)?;
    let mut v = json!({
        "n": spec.n(),
        "p": spec.p(),
        "q": spec.q(),
        "seed": spec.seed(),
        "rows": a.rows,
        "adds": ops.adds,
        "muls": ops.muls,
    });
    if a.out.is_some() || a.n <= DENSE_LIMIT {
        let h: Tensor<f64> = spec.realize();
        v["orthogonality_error"] = num(orthogonality_error(&h));
        if let Some(out) = &a.out {
            let mut map = TensorMap::new();
            map.insert("hadamard".to_string(), h);
            save(out, &map)?;
        }
    }
    emit(a.json, &v, || {
        let mut s = format!(
            "order {} = {} x {}\nrows {}: {} adds, {} muls\n",
            spec.n(),
            spec.p(),
            spec.q(),
            a.rows,
            ops.adds,
            ops.muls
        );
        if let Some(e) = v.get("orthogonality_error") {
            s += &format!("orthogonality error {e}\n");
        }
        s
    })
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let v_mode: VMode = a.v_mode.parse()?;
    let w = DiTBlockWeights::from_tensor_map(&load(&a.weights)?, a.heads)?;
    let plan = FusionPlan::for_weights(&w, v_mode, a.seed)?;
    let fused = fuse_block(&w, &plan)?;
    save(&a.out, &fused.weights.to_tensor_map())?;
    let v = json!({
        "dim": w.dim(),
        "hidden": w.hidden(),
        "heads": w.heads,
        "v_mode": v_mode,
        "seed": a.seed,
        "online": {
            "input": fused.online.input.as_ref().map(|h| h.n()),
            "head_mix": fused.online.head_mix.as_ref().map(|h| h.n()),
            "hidden": fused.online.hidden.as_ref().map(|h| h.n()),
        },
    });
    emit(a.json, &v, || {
        format!(
            "fused {} (dim {}, hidden {}, {} heads)\nonline: input H{}, head mix {}, hidden H{}\n",
            a.out.display(),
            w.dim(),
            w.hidden(),
            w.heads,
            w.dim(),
            match &fused.online.head_mix {
                Some(h) => format!("H{} x I{}", h.n(), w.head_dim()),
                None => "none".to_string(),
            },
            w.hidden()
        )
    })
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let policy: FormatPolicy = a.format.parse()?;
    let selection = SelectionConfig {
        alpha: a.alpha,
        n_bits: a.bits,
    };
    selection.validate()?;
    let gptq = match a.method.as_str() {
        "rtn" => None,
        "gptq" => {
            let cfg = GptqConfig {
                block_size: a.block,
                damping: a.damping,
                format: policy,
                selection,
            };
            cfg.validate()?;
            Some(cfg)
        }
        other => {
            return Err(Error::Parameter(format!(
                "method must be gptq or rtn, got {other:?}"
            )))
        }
    };
    let calib = match (&gptq, &a.calib) {
        (Some(_), Some(path)) => Some(load(path)?),
        (Some(_), None) => return Err(Error::Parameter("gptq needs --calib".into())),
        (None, _) => None,
    };

    let weights = load(&a.weights)?;
    let mut out = TensorMap::new();
    let mut rows = Vec::new();
    for (name, w) in &weights {
        if w.ndim() != 2 {
            out.insert(name.clone(), w.clone());
            continue;
        }
        let format = policy.resolve(w, &selection)?;
        let q = match (&gptq, &calib) {
            (Some(cfg), Some(cal)) => {
                let x = cal.get(name).ok_or_else(|| {
                    Error::Parameter(format!("calibration file lacks tensor {name:?}"))
                })?;
                gptq_quantize_with_format(w, &CalibrationSet::new(x.clone())?, format, cfg)?
            }
            _ => rtn_quantize(w, format)?,
        };
        let err = quant_error(w, &q)?;
        rows.push(json!({
            "name": name,
            "format": format,
            "bias_min": q.biases.iter().min(),
            "bias_max": q.biases.iter().max(),
            "mse": num(err.mse),
            "sqnr_db": num(err.sqnr_db),
        }));
        q.insert_into(name, &mut out);
    }
    save(&a.out, &out)?;
    let v = json!({ "method": a.method, "tensors": rows });
    emit(a.json, &v, || {
        rows.iter()
            .map(|r| {
                format!(
                    "{:<24} {}  sqnr {} dB\n",
                    r["name"].as_str().unwrap_or(""),
                    r["format"].as_str().unwrap_or(""),
                    r["sqnr_db"]
                )
            })
            .collect()
    })
}

pub fn select_format(a: SelectArgs) -> Result<()> {
    let map = load(&a.weights)?;
    let mut rows = Vec::new();
    for (name, w) in map.iter().filter(|(_, t)| t.ndim() == 2) {
        let s_w = spread_indicator(w, a.alpha)?;
        let format = select_for_spread(s_w, a.bits)?;
        rows.push(json!({ "name": name, "spread": num(s_w), "format": format }));
    }
    let v = json!({ "alpha": a.alpha, "bits": a.bits, "tensors": rows });
    emit(a.json, &v, || {
        rows.iter()
            .map(|r| {
                format!(
                    "{:<24} s_w {:<12} {}\n",
                    r["name"].as_str().unwrap_or(""),
                    r["spread"].to_string(),
                    r["format"].as_str().unwrap_or("")
                )
            })
            .collect()
    })
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<HarnessConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parameter(format!("config {}: {e}", p.display())))?
        }
        None => HarnessConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(f) = &o.format {
        cfg.weight_format = f.parse()?;
    }
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(n) = o.n {
        cfg.n = n;
    }
    if let Some(t) = o.tokens {
        cfg.tokens = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, v: &impl serde::Serialize) -> Result<()> {
    match path {
        Some(p) => {
            let mut text = serde_json::to_string_pretty(v)?;
            text.push('\n');
            std::fs::write(p, text)?;
            Ok(())
        }
        None => print_json(v),
    }
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let report = run(&cfg)?;
    write_or_print(a.report.as_deref(), &report)
}

pub fn cost(a: CostArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    write_or_print(a.out.as_deref(), &estimate_cost(&cfg)?)
}
