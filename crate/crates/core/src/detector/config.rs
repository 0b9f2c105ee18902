use crate::error::{Error, Result};
use crate::lightml::LightMLParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Architecture of a dense detector. Backbone stage `i` halves the resolution, so stage
/// outputs sit at strides `2, 4, 8, ...`; the pyramid taps the stages matching `strides`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub role: Role,
    pub widths: Vec<usize>,
    /// Extra stride-1 convs after each stage's downsampling conv.
    pub depths: Vec<usize>,
    pub head_channels: usize,
    /// Stacked 3x3 convs in each head branch before the prediction convs.
    pub head_convs: usize,
    pub num_classes: usize,
    pub bins: usize,
    pub strides: Vec<usize>,
    pub light_ml: bool,
    pub light_ml_params: LightMLParams,
}

impl ModelConfig {
    pub fn student() -> Self {
        ModelConfig {
            role: Role::Student,
            widths: vec![8, 16, 24, 32],
            depths: vec![0, 0, 0, 0],
            head_channels: 24,
            head_convs: 1,
            num_classes: 3,
            bins: 8,
            strides: vec![8, 16],
            light_ml: false,
            light_ml_params: LightMLParams::default(),
        }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            role: Role::Teacher,
            widths: vec![16, 32, 48, 64],
            depths: vec![0, 1, 1, 1],
            head_channels: 48,
            head_convs: 2,
            ..Self::student()
        }
    }

    pub fn max_stride(&self) -> usize {
        self.strides.last().copied().unwrap_or(1)
    }

    /// Backbone stage whose output has stride `stride`.
    pub fn stage_for_stride(stride: usize) -> usize {
        stride.trailing_zeros() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bins < 2 {
            return fail(format!("bins must be >= 2, got {}", self.bins));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("strides must be strictly increasing, got {:?}", self.strides));
        }
        if self.strides.iter().any(|s| *s < 2 || !s.is_power_of_two()) {
            return fail(format!("strides must be powers of two >= 2, got {:?}", self.strides));
        }
        if self.widths.len() != self.depths.len() {
            return fail("widths and depths must have the same length".into());
        }
        if Self::stage_for_stride(self.max_stride()) >= self.widths.len() {
            return fail(format!(
                "{} backbone stages cannot reach stride {}",
                self.widths.len(),
                self.max_stride()
            ));
        }
        if self.widths.contains(&0) || self.head_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        self.light_ml_params.validate()
    }
}
