//! Collision frequency given either as a number or as an expression in `z`
//! such as `2 + z` or `1 + 0.5 * math::sin(z)`.

use std::fmt;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, HashMapContext, Node, Value};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Constant(f64),
    Expr(String),
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Constant(10.0)
    }
}

impl fmt::Display for SigmaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaSpec::Constant(v) => write!(f, "{v}"),
            SigmaSpec::Expr(e) => f.write_str(e),
        }
    }
}

impl SigmaSpec {
    /// Numbers become constants; anything else must compile as an expression in `z`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if let Ok(v) = text.parse::<f64>() {
            return Ok(SigmaSpec::Constant(v));
        }
        let spec = SigmaSpec::Expr(text.to_string());
        spec.compile()?;
        Ok(spec)
    }

    pub fn compile(&self) -> Result<Sigma> {
        match self {
            SigmaSpec::Constant(v) => {
                if !v.is_finite() || *v < 0.0 {
                    return Err(config_err!("sigma must be a finite non-negative number, got {v}"));
                }
                Ok(Sigma::Constant(*v))
            }
            SigmaSpec::Expr(text) => {
                let node = build_operator_tree(text)
                    .map_err(|e| config_err!("cannot parse sigma expression '{text}': {e}"))?;
                if let Some(bad) = node.iter_variable_identifiers().find(|v| *v != "z") {
                    return Err(config_err!(
                        "sigma expression '{text}' uses unknown variable '{bad}' (only z is allowed)"
                    ));
                }
                let depends = node.iter_variable_identifiers().next().is_some();
                let sigma = Sigma::Expr { node, depends };
                // evalexpr accepts some malformed input (e.g. "2 +") until evaluation
                sigma.raw(1.0).map_err(|e| config_err!("invalid sigma expression '{text}': {e}"))?;
                Ok(sigma)
            }
        }
    }
}

/// A compiled [`SigmaSpec`].
#[derive(Debug, Clone)]
pub enum Sigma {
    Constant(f64),
    Expr { node: Node, depends: bool },
}

impl Sigma {
    pub fn depends_on_z(&self) -> bool {
        matches!(self, Sigma::Expr { depends: true, .. })
    }

    pub fn eval(&self, z: f64) -> Result<f64> {
        match self {
            Sigma::Constant(v) => Ok(*v),
            Sigma::Expr { .. } => {
                let v = self
                    .raw(z)
                    .map_err(|e| config_err!("cannot evaluate sigma at z = {z}: {e}"))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(config_err!("sigma({z}) = {v} is not a valid collision frequency"));
                }
                Ok(v)
            }
        }
    }
}

impl Sigma {
    fn raw(&self, z: f64) -> std::result::Result<f64, evalexpr::EvalexprError> {
        match self {
            Sigma::Constant(v) => Ok(*v),
            Sigma::Expr { node, .. } => {
                let mut ctx = HashMapContext::new();
                ctx.set_value("z".into(), Value::Float(z))?;
                node.eval_number_with_context(&ctx)
            }
        }
    }
}
