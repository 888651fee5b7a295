use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtspInstance {
    pub depot: Point,
    pub cities: Vec<Point>,
    pub agents: usize,
}

impl MtspInstance {
    pub fn new(depot: Point, cities: Vec<Point>, agents: usize) -> Result<Self> {
        let inst = MtspInstance { depot, cities, agents };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Invalid("an instance needs at least one agent".into()));
        }
        if self.cities.len() < self.agents {
            return Err(Error::Invalid(format!("{} cities for {} agents", self.cities.len(), self.agents)));
        }
        let inside = |p: &Point| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside(&self.depot) || !self.cities.iter().all(inside) {
            return Err(Error::Invalid("coordinates must lie in the unit square".into()));
        }
        Ok(())
    }

    /// Depot and cities uniform in the unit square.
    pub fn random(rng: &mut impl Rng, cities: usize, agents: usize) -> Result<Self> {
        let mut pt = || [rng.gen::<f64>(), rng.gen::<f64>()];
        let depot = pt();
        let cities = (0..cities).map(|_| pt()).collect();
        MtspInstance::new(depot, cities, agents)
    }

    pub fn len(&self) -> usize {
        self.cities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cities.is_empty()
    }

    /// Polar angle of each city around the depot, in `(-pi, pi]`.
    pub fn angles(&self) -> Vec<f64> {
        self.cities.iter().map(|c| (c[1] - self.depot[1]).atan2(c[0] - self.depot[0])).collect()
    }

    /// City indices by increasing angle, ties by index.
    pub fn sweep_order(&self) -> Vec<usize> {
        let a = self.angles();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
        order
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: MtspInstance = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }
}
