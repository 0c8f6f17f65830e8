use super::{Click, PromptState, Sign};

/// Positive influence, negative influence, previous mask, has-previous-mask flag.
pub const PROMPT_CHANNELS: usize = 4;

/// Encodes clicks and the previous mask into a per-pixel channel stack of
/// length `width * height * PROMPT_CHANNELS`.
///
/// Each click contributes `exp(-|p - c|^2 / (2 sigma^2))` to its sign's
/// channel, with `sigma = sigma_fraction * max(width, height)`.
pub fn encode_prompts(prompts: &PromptState<'_>, width: usize, height: usize, sigma_fraction: f64) -> Vec<f64> {
    let n = width * height;
    let mut out = vec![0.0; n * PROMPT_CHANNELS];

    let sigma = sigma_fraction * width.max(height) as f64;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);

    // Summation order must not depend on click order.
    let mut ordered: Vec<&Click> = prompts.clicks.iter().collect();
    ordered.sort_by_key(|c| (c.y, c.x));

    let mut along_x = vec![0.0; width];
    let mut along_y = vec![0.0; height];
    for click in ordered {
        let channel = match click.sign {
            Sign::Positive => 0,
            Sign::Negative => 1,
        };
        for (x, v) in along_x.iter_mut().enumerate() {
            let d = x as f64 - click.x as f64;
            *v = (-d * d * inv_two_var).exp();
        }
        for (y, v) in along_y.iter_mut().enumerate() {
            let d = y as f64 - click.y as f64;
            *v = (-d * d * inv_two_var).exp();
        }
        for y in 0..height {
            let row = &mut out[y * width * PROMPT_CHANNELS..(y + 1) * width * PROMPT_CHANNELS];
            for x in 0..width {
                row[x * PROMPT_CHANNELS + channel] += along_x[x] * along_y[y];
            }
        }
    }

    if let Some(mask) = prompts.prev_mask {
        for (i, &bit) in mask.bits().iter().enumerate() {
            out[i * PROMPT_CHANNELS + 2] = if bit { 1.0 } else { 0.0 };
            out[i * PROMPT_CHANNELS + 3] = 1.0;
        }
    }
    out
}
