//! File-format descriptions shown by `--help`.

pub const MANIFEST: &str = "\
MANIFEST (CSV, header row required, columns matched by name):
  path       image file (PNG or binary PPM); relative paths resolve against
             the manifest's directory
  label      real | synthetic
  generator  free text (e.g. the generator name, or real)
  group      pairing key; each group's synthetic images are evaluated
             against the real images of the same group";

pub const FEATURE_TABLE: &str = "\
FEATURE TABLE (CSV):
  path,label,generator,group,nll0,nll1,nll2,h0,h1,h2,d0,d1,d2,delta01,abs_d0,abs_delta01
  nllL/hL are mean NLL and entropy at level L in nats per coded pixel
  channel; dL = nllL - hL, delta01 = d0 - d1, abs_* are absolute values.
  Numbers are written with 17 significant digits.";

pub const WEIGHTS: &str = "\
WEIGHTS (binary, little-endian): magic ZEDW, u16 version, u32 mixtures,
  trunk_depth, trunk_channels, head_width, kernel, levels, u32 tensor
  count, then per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
  f32 values.";

pub const TRAIN_REPORT: &str = "\
TRAIN REPORT (JSON lines): {\"step\", \"loss\", \"level_losses\": [l0, l1, l2]}
  every log_every steps and at the last step (nats per coded pixel
  channel), then {\"summary\": {\"seed\", \"steps\", \"initial_nll\",
  \"final_validation_nll\", \"wall_time_secs\"}}.";

pub const EVAL_REPORT: &str = "\
EVALUATION REPORT (JSON): {\"statistic\", \"seed\", \"global_auc\" (mean of
  group AUCs), \"pooled_auc\", \"groups\": [{\"name\", \"n_real\", \"n_fake\",
  \"auc\", \"ba_at_threshold\"}], \"threshold\", \"threshold_source\" (user |
  sweep), \"sweep_best_accuracy\", \"sweep\": [[threshold, balanced_accuracy], ...]}
SWEEP CSV: threshold,balanced_accuracy
GAP CSV: group,label,level,n,mean_d,std_d
Scores larger than the threshold are classified synthetic.";

pub const MAPS: &str = "\
MAPS: gap_level{0,1,2}.png are grayscale images of the channel-averaged
  nll - h per pixel; maps.json holds per level {level, file, width, height,
  offset, scale} with value = offset + scale * pixel (scale 0: constant
  map). Bottom-right pixels of each 2x2 group are uncoded and stored as 0.";

pub const BITSTREAM: &str = "\
COMPRESSED IMAGE (binary, little-endian): magic ZEDC, u16 version, u32
  width, u32 height (multiples of 8), 32-byte SHA-256 of the weights file,
  raw 1/8-scale image, 2-bit rounding codes for the 1/8, 1/4 and 1/2
  scale averages, u32 length, range-coded pixels.";

pub const CONFIG: &str = "\
CONFIG FILE: `key = value` lines, `#` starts a comment, unknown keys are
  rejected. Precedence: defaults < config file < command-line flags.";

pub const EXIT_CODES: &str = "\
EXIT CODES: 0 success, 1 usage error, 2 data error (unreadable or
  malformed input), 3 numerical failure.";

pub fn config_keys() -> String {
    let mut s = String::from("CONFIG KEYS:\n");
    for (k, d) in crate::config::KEYS {
        s.push_str(&format!("  {k:<15} {d}\n"));
    }
    s
}
