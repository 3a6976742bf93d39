//! Named, seeded parameter registry with gradient buffers and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DflatError, Result};
use crate::tensor::Tensor;

/// Standard deviation of every randomly initialised matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Every learnable tensor of a model, registered in a fixed order.
///
/// Two stores built from the same seed with the same registration sequence
/// hold bit-identical values.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            slots: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DflatError::config(format!("parameter {name} registered twice")));
        }
        let id = self.slots.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.dims());
        self.slots.push(Slot { name, value, grad });
        Ok(ParamId(id))
    }

    /// Registers a tensor drawn from `N(0, INIT_STD²)` using the store's stream.
    pub fn register_normal(&mut self, name: impl Into<String>, dims: &[usize]) -> Result<ParamId> {
        let value = self.normal(dims, INIT_STD);
        self.register(name, value)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::zeros(dims))
    }

    pub fn register_ones(&mut self, name: impl Into<String>, dims: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::filled(dims, 1.0))
    }

    pub(crate) fn normal(&mut self, dims: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = dims.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(dims.to_vec(), data).expect("dims match generated length")
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    /// Looks a parameter up by name; panics on a missing name.
    pub fn by_name(&self, name: &str) -> &Tensor {
        let id = self
            .id(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.value(id)
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.slots[id.0].grad.add_assign(g);
    }

    /// Manifest text (`name<TAB>dims<TAB>offset` per line) and the flat blob.
    pub fn to_checkpoint(&self) -> (String, Tensor) {
        let mut manifest = String::new();
        let mut flat = Vec::with_capacity(self.total_scalars());
        let _ = writeln!(manifest, "# dflat checkpoint v1 seed={}", self.seed);
        for s in &self.slots {
            let dims: Vec<String> = s.value.dims().iter().map(ToString::to_string).collect();
            let _ = writeln!(manifest, "{}\t{}\t{}", s.name, dims.join(","), flat.len());
            flat.extend_from_slice(s.value.data());
        }
        let blob = Tensor::new(vec![flat.len().max(1)], if flat.is_empty() { vec![0.0] } else { flat })
            .expect("flat blob is rank 1");
        (manifest, blob)
    }

    /// Overwrites values from a checkpoint; names and dims must match exactly.
    pub fn load_checkpoint(&mut self, manifest: &str, blob: &Tensor) -> Result<()> {
        let mut seen = 0;
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(name), Some(dims), Some(offset), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(DflatError::Format(format!("bad manifest line: {line}")));
            };
            let dims: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DflatError::Format(format!("bad dims in {line}: {e}")))?;
            let offset: usize = offset
                .parse()
                .map_err(|e| DflatError::Format(format!("bad offset in {line}: {e}")))?;
            let id = self
                .id(name)
                .ok_or_else(|| DflatError::Format(format!("checkpoint has unknown parameter {name}")))?;
            if self.value(id).dims() != dims.as_slice() {
                return Err(DflatError::shape("load_checkpoint", self.value(id).dims(), &dims));
            }
            let n: usize = dims.iter().product();
            let src = blob
                .data()
                .get(offset..offset + n)
                .ok_or_else(|| DflatError::Format(format!("blob too short for {name}")))?;
            self.value_mut(id).data_mut().copy_from_slice(src);
            seen += 1;
        }
        if seen != self.len() {
            return Err(DflatError::Format(format!(
                "checkpoint covers {seen} of {} parameters",
                self.len()
            )));
        }
        Ok(())
    }

    /// Writes `<stem>.manifest` and `<stem>.dflt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (manifest, blob) = self.to_checkpoint();
        let mpath = dir.join(format!("{stem}.manifest"));
        fs::write(&mpath, manifest).map_err(|e| DflatError::io(&mpath, e))?;
        let bpath = dir.join(format!("{stem}.dflt"));
        fs::write(&bpath, blob.to_dump_bytes()).map_err(|e| DflatError::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let mpath = dir.join(format!("{stem}.manifest"));
        let manifest = fs::read_to_string(&mpath).map_err(|e| DflatError::io(&mpath, e))?;
        let bpath = dir.join(format!("{stem}.dflt"));
        let bytes = fs::read(&bpath).map_err(|e| DflatError::io(&bpath, e))?;
        let blob = Tensor::read_dump(&bytes[..])?;
        self.load_checkpoint(&manifest, &blob)
    }
}
