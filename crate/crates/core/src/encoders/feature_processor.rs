//! Frame front end: instance normalization over the time axis followed by
//! two strided valid convolutions with GELU, downsampling frames into
//! subword-rate steps (12x with the default 4-then-3 strides).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub struct FeatureProcessor {
    conv1_kernel: ParamId,
    conv1_bias: ParamId,
    conv2_kernel: ParamId,
    conv2_bias: ParamId,
    conv1: (usize, usize),
    conv2: (usize, usize),
    feature_dim: usize,
    hidden: usize,
    eps: f64,
}

impl FeatureProcessor {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        side: &str,
        feature_dim: usize,
        hidden: usize,
        conv1: (usize, usize),
        conv2: (usize, usize),
        eps: f64,
        rng: &mut R,
    ) -> Result<FeatureProcessor> {
        for (name, (k, s)) in [("conv1", conv1), ("conv2", conv2)] {
            if k == 0 || s == 0 {
                return Err(Error::Config(format!(
                    "{name} kernel and stride must be positive, got k={k} stride={s}"
                )));
            }
        }
        if feature_dim == 0 || hidden == 0 {
            return Err(Error::Config(
                "feature_dim and conv hidden width must be positive".into(),
            ));
        }
        let conv1_kernel = store.add(
            &format!("{side}.conv1.kernel"),
            super::conv_init(rng, conv1.0, feature_dim, hidden),
        )?;
        let conv1_bias = store.add(&format!("{side}.conv1.bias"), Tensor::zeros(&[hidden]))?;
        let conv2_kernel = store.add(
            &format!("{side}.conv2.kernel"),
            super::conv_init(rng, conv2.0, hidden, hidden),
        )?;
        let conv2_bias = store.add(&format!("{side}.conv2.bias"), Tensor::zeros(&[hidden]))?;
        Ok(FeatureProcessor {
            conv1_kernel,
            conv1_bias,
            conv2_kernel,
            conv2_bias,
            conv1,
            conv2,
            feature_dim,
            hidden,
            eps,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.hidden
    }

    /// Fewest input frames that still yield one output step.
    pub fn min_frames(&self) -> usize {
        self.conv1.0 + (self.conv2.0 - 1) * self.conv1.1
    }

    /// Output steps for a given number of input frames.
    pub fn output_steps(&self, frames: usize) -> Option<usize> {
        if frames < self.min_frames() {
            return None;
        }
        let t1 = (frames - self.conv1.0) / self.conv1.1 + 1;
        Some((t1 - self.conv2.0) / self.conv2.1 + 1)
    }

    /// [output_steps, hidden] rows from [frames, feature_dim] input.
    pub fn process(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &Tensor,
        utterance: &str,
    ) -> Result<Var> {
        if frames.rank() != 2 || frames.cols() != self.feature_dim {
            return Err(Error::Dim(format!(
                "{utterance}: expected frames with {} features, got {:?}",
                self.feature_dim,
                frames.shape()
            )));
        }
        if frames.rows() < self.min_frames() {
            return Err(Error::SequenceTooShort {
                utterance: utterance.to_string(),
                got: frames.rows(),
                min: self.min_frames(),
            });
        }
        let x = tape.constant(frames.clone());
        let x = tape.instance_norm_cols(x, self.eps)?;

        let k1 = tape.param(store, self.conv1_kernel);
        let b1 = tape.param(store, self.conv1_bias);
        let h = tape.conv1d(x, k1, self.conv1.1)?;
        let h = tape.add_row_vec(h, b1)?;
        let h = tape.gelu(h);

        let k2 = tape.param(store, self.conv2_kernel);
        let b2 = tape.param(store, self.conv2_bias);
        let h = tape.conv1d(h, k2, self.conv2.1)?;
        let h = tape.add_row_vec(h, b2)?;
        Ok(tape.gelu(h))
    }
}
