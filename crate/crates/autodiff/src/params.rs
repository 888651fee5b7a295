//! Named parameters and their text persistence.
//!
//! The weights document is a JSON object mapping each parameter name to
//! `{"shape": [...], "data": [...], "trainable": bool}`. Values are written
//! with 17 significant digits so a save/load cycle is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{AdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Name-ordered collection of parameters; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a parameter; a duplicate name is rejected.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AdError::Params(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), Parameter { name: name.to_string(), value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    /// Replaces a parameter value with a fresh tensor of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| AdError::Params(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch { op: "set", lhs: p.value.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape: trainable ones as leaves, frozen
    /// ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .values()
            .map(|p| {
                let v = if p.trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (p.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of `loss` for every trainable parameter, keyed by name.
    pub fn gradients(&self, tape: &mut Tape, bound: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&str> = self.params.values().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
        let vars: Vec<Var> = names.iter().map(|n| bound.get(n)).collect();
        let grads = tape.grad(loss, &vars)?;
        Ok(names.into_iter().map(String::from).zip(grads).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("{\n");
        let n = self.params.len();
        for (i, p) in self.params.values().enumerate() {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let data: Vec<String> = p.value.data().iter().map(|v| format_f64(*v)).collect();
            let _ = write!(
                out,
                "  {}: {{\"shape\": [{}], \"trainable\": {}, \"data\": [{}]}}",
                Value::String(p.name.clone()),
                shape.join(", "),
                p.trainable,
                data.join(", ")
            );
            out.push_str(if i + 1 < n { ",\n" } else { "\n" });
        }
        out.push_str("}\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        let obj = doc.as_object().ok_or_else(|| AdError::Params("weights document must be an object".into()))?;
        let mut store = ParamStore::new();
        for (name, entry) in obj {
            let bad = |what: &str| AdError::Params(format!("parameter {name}: {what}"));
            let shape = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("bad extent")))
                .collect::<Result<Vec<_>>>()?;
            let data = entry
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing data"))?
                .iter()
                .map(|d| d.as_f64().ok_or_else(|| bad("non-numeric value")))
                .collect::<Result<Vec<_>>>()?;
            let trainable = entry.get("trainable").and_then(Value::as_bool).unwrap_or(true);
            store.insert(name, Tensor::new(shape, data)?, trainable)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParamStore::from_text(&std::fs::read_to_string(path)?)
    }
}

/// 17 significant digits in JSON-compatible exponent notation.
fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no representation for these; a loader will reject it.
        "null".to_string()
    }
}
