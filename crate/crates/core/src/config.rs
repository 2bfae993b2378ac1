//! Model configuration, presets and the full-resolution dry run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::NattenConfig;
use crate::error::{config, CoreError, Result};
use crate::grid::{validate_window, Extents, GridSpec, STATIC_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// Leading surface channels fed to the encoder.
    pub surface_in: usize,
    /// Surface channels predicted by the decoder (and stored in datasets).
    pub surface_out: usize,
    pub atmos: usize,
    pub levels: usize,
    /// Pressure levels merged into one vertical token.
    pub level_patch: usize,
    /// Horizontal downsampling from grid to latent; a power of two.
    pub downsample: usize,
    /// Convolution widths at full resolution and after each stride-2 stage.
    pub conv_widths: Vec<usize>,
    pub resnet_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub window: Extents,
    pub mlp_ratio: usize,
    /// NATTEN blocks at the end of the encoder and start of the decoder.
    pub codec_blocks: usize,
    pub processor_blocks: usize,
    /// Start every block's output projections at zero.
    #[serde(default)]
    pub zero_init_outputs: bool,
}

impl ModelConfig {
    /// Full-resolution architecture: 0.25° grid, 8 of 17 surface variables in,
    /// 5 atmospheric variables on 28 levels, 8× downsampling, hidden 1024,
    /// window (5, 7, 7), 2 codec and 10 processor blocks.
    pub fn full() -> Self {
        ModelConfig {
            grid: GridSpec::quarter_degree(),
            surface_in: 8,
            surface_out: 17,
            atmos: 5,
            levels: 28,
            level_patch: 7,
            downsample: 8,
            conv_widths: vec![64, 128, 256, 512],
            resnet_blocks: 2,
            hidden: 1024,
            heads: 8,
            window: [5, 7, 7],
            mlp_ratio: 4,
            codec_blocks: 2,
            processor_blocks: 10,
            zero_init_outputs: false,
        }
    }

    /// Workstation-sized model on the 40 × 80 grid with a 3 × 5 × 10 latent.
    pub fn desk() -> Self {
        ModelConfig {
            grid: GridSpec::desk(),
            surface_in: 3,
            surface_out: 4,
            atmos: 2,
            levels: 4,
            level_patch: 2,
            downsample: 8,
            conv_widths: vec![6, 8, 12, 16],
            resnet_blocks: 2,
            hidden: 48,
            heads: 8,
            window: [3, 3, 5],
            mlp_ratio: 4,
            codec_blocks: 2,
            processor_blocks: 2,
            zero_init_outputs: false,
        }
    }

    /// Smallest useful model, for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            grid: GridSpec::centered(8, 16),
            surface_in: 2,
            surface_out: 2,
            atmos: 1,
            levels: 2,
            level_patch: 2,
            downsample: 4,
            conv_widths: vec![2, 3, 4],
            resnet_blocks: 1,
            hidden: 8,
            heads: 2,
            window: [1, 1, 3],
            mlp_ratio: 2,
            codec_blocks: 1,
            processor_blocks: 1,
            zero_init_outputs: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config(format!("unknown preset {other:?} (full, desk, tiny)"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn depth_tokens(&self) -> usize {
        self.levels / self.level_patch.max(1) + 1
    }

    /// Token grid as (depth, rows, cols).
    pub fn latent_extents(&self) -> Extents {
        [
            self.depth_tokens(),
            self.grid.rows / self.downsample.max(1),
            self.grid.cols / self.downsample.max(1),
        ]
    }

    pub fn tokens(&self) -> usize {
        self.latent_extents().iter().product()
    }

    pub fn natten(&self) -> NattenConfig {
        NattenConfig {
            hidden: self.hidden,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn encoder_channels(&self) -> usize {
        self.surface_in + STATIC_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let f = self.downsample;
        if f == 0 || !f.is_power_of_two() {
            return Err(config(format!("downsample factor {f} must be a power of two")));
        }
        if self.grid.rows % f != 0 || self.grid.cols % f != 0 {
            return Err(config(format!(
                "grid {}×{} not divisible by downsample factor {f}",
                self.grid.rows, self.grid.cols
            )));
        }
        if self.level_patch == 0 || self.levels == 0 || self.levels % self.level_patch != 0 {
            return Err(config(format!(
                "{} levels cannot be patched by {}",
                self.levels, self.level_patch
            )));
        }
        if self.surface_in == 0 || self.surface_in > self.surface_out || self.atmos == 0 {
            return Err(config(format!(
                "channel counts surface in {} / out {} / atmos {}",
                self.surface_in, self.surface_out, self.atmos
            )));
        }
        if self.conv_widths.len() != self.stages() + 1 || self.conv_widths.contains(&0) {
            return Err(config(format!(
                "need {} positive conv widths for {} stages, got {:?}",
                self.stages() + 1,
                self.stages(),
                self.conv_widths
            )));
        }
        self.natten().validate(self.latent_extents())?;
        validate_window(self.window, self.latent_extents())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Shape propagation and parameter count without allocating anything.
    pub fn dry_run(&self) -> Result<DryRun> {
        self.validate()?;
        let g = &self.grid;
        let w = &self.conv_widths;
        let [dp, hp, wp] = self.latent_extents();
        let mut shapes = vec![
            ("encoder input surface".to_string(), vec![self.encoder_channels(), g.rows, g.cols]),
            ("encoder input atmosphere".to_string(), vec![self.atmos, self.levels, g.rows, g.cols]),
            ("stem".to_string(), vec![w[0], dp, g.rows, g.cols]),
        ];
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k + cout;
        let mut params = conv(w[0], self.encoder_channels(), 1) + conv(w[0], self.atmos, self.level_patch);
        let res = |c: usize| 2 * conv(c, c, 9);
        for s in 0..self.stages() {
            let (h, wd) = (g.rows >> (s + 1), g.cols >> (s + 1));
            shapes.push((format!("encoder stage {}", s + 1), vec![w[s + 1], dp, h, wd]));
            params += conv(w[s + 1], w[s], 4) + self.resnet_blocks * res(w[s + 1]);
        }
        let last = w[self.stages()];
        params += conv(self.hidden, last, 1);
        shapes.push(("latent".to_string(), vec![dp * hp * wp, self.hidden]));
        let d = self.hidden;
        let m = d * self.mlp_ratio;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
        let encoder = params + self.codec_blocks * block;
        let mut dec = self.codec_blocks * block + conv(last, d, 1);
        for s in (0..self.stages()).rev() {
            dec += self.resnet_blocks * res(w[s + 1]) + conv(w[s], w[s + 1], 4);
        }
        dec += conv(self.surface_out, w[0], 1) + w[0] * self.atmos * self.level_patch + self.atmos;
        shapes.push(("decoder output surface".to_string(), vec![self.surface_out, g.rows, g.cols]));
        shapes.push((
            "decoder output atmosphere".to_string(),
            vec![self.atmos, self.levels, g.rows, g.cols],
        ));
        let processor = self.processor_blocks * block;
        Ok(DryRun {
            latent: [dp, hp, wp],
            tokens: dp * hp * wp,
            shapes,
            encoder_params: encoder,
            decoder_params: dec,
            processor_params: processor,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryRun {
    pub latent: Extents,
    pub tokens: usize,
    /// Named activation shapes along the forward path.
    pub shapes: Vec<(String, Vec<usize>)>,
    pub encoder_params: usize,
    pub decoder_params: usize,
    pub processor_params: usize,
}
