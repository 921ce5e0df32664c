use std::fmt::Write;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::ffn_space::{evaluate_dag, LayerWeights, LinearWeights, StackWeights};
use crate::tensor::{Tape, Tensor};

/// Uniform inclusive grid over `[lo, hi]` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -15.0,
            hi: 5.0,
            steps: 100,
        }
    }
}

impl GridSpec {
    pub fn coords(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let span = self.hi - self.lo;
        (0..self.steps)
            .map(|i| self.lo + span * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Set when `z` is not finite.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub points: Vec<SurfacePoint>,
}

impl Surface {
    /// CSV with header `x,y,z,flag`; `comment` lines go first, prefixed with `# `.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        s.push_str("x,y,z,flag\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.z, u8::from(p.flagged));
        }
        s
    }
}

/// Probes the FFN stack alone: attention removed, layer norm replaced by the per-position
/// mean, every linear weight 1 and bias 0. The probe point `(x, y)` is the whole input of a
/// length-1 sequence and `z` is the mean of the last layer's output. Rows run `x`-major.
pub fn nonlinearity_surface(cfg: &ModelConfig, grid: &GridSpec) -> Result<Surface> {
    if cfg.hidden != 2 {
        return Err(Error::Input(format!(
            "surface probe needs hidden size 2, got {}",
            cfg.hidden
        )));
    }
    if grid.steps == 0 || !(grid.lo.is_finite() && grid.hi.is_finite()) {
        return Err(Error::Input("degenerate grid".into()));
    }
    let coords = grid.coords();
    let n = coords.len() * coords.len();
    let mut input = Vec::with_capacity(2 * n);
    for &x in &coords {
        for &y in &coords {
            input.extend([x, y]);
        }
    }
    let d = cfg.hidden;
    let mut tape = Tape::new();
    let mut h = tape.constant(Tensor::new(vec![n, d], input.clone())?);
    for spec in &cfg.genotype.layers {
        let w = spec.width(cfg.d_ref);
        let lin = |tape: &mut Tape<'_>, i: usize, o: usize| LinearWeights {
            weight: tape.constant(Tensor::ones(&[i, o])),
            bias: tape.constant(Tensor::zeros(&[o])),
        };
        let weights = LayerWeights {
            stacks: (0..spec.stack)
                .map(|_| StackWeights {
                    expand: (0..spec.count_linear(true))
                        .map(|_| lin(&mut tape, d, w))
                        .collect(),
                    contract: (0..spec.count_linear(false))
                        .map(|_| lin(&mut tape, w, d))
                        .collect(),
                })
                .collect(),
        };
        let f = evaluate_dag(&mut tape, spec, h, &weights)?;
        let y = tape.add(h, f)?;
        h = tape.mean_norm(y);
    }
    let out = tape.value(h);
    let points = (0..n)
        .map(|i| {
            let z = out[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64;
            SurfacePoint {
                x: input[2 * i],
                y: input[2 * i + 1],
                z,
                flagged: !z.is_finite(),
            }
        })
        .collect();
    Ok(Surface { points })
}
