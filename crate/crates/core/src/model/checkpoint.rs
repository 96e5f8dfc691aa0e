use std::path::Path;

use super::{ToyModel, ToyModelConfig};
use crate::error::{Error, Result};
use crate::io::NamedArrays;
use crate::tensor::Tensor;
use crate::Scalar;

impl<T: Scalar> ToyModel<T> {
    /// Parameters as named `f64` arrays with the config as metadata.
    pub fn to_arrays(&self) -> Result<NamedArrays> {
        let mut out = NamedArrays {
            meta: serde_json::json!({ "kind": "toy_model", "config": self.config, "dtype": T::DTYPE }),
            arrays: Vec::new(),
        };
        for (name, t) in self.named_params() {
            out.push(name, t.shape(), t.to_f64_vec());
        }
        Ok(out)
    }

    pub fn from_arrays(arrays: &NamedArrays) -> Result<Self> {
        let config: ToyModelConfig = serde_json::from_value(
            arrays
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
        )?;
        let mut model = ToyModel::<T>::new(config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let (shape, data) = arrays.get(name)?;
            if shape != p.shape() {
                return Err(Error::Format(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    name,
                    shape,
                    p.shape()
                )));
            }
            *p = Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_arrays()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(&NamedArrays::load(path)?)
    }
}
