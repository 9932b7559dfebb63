use rand::Rng;

use super::{DistillConfig, DistillError};
use crate::vit::Image;

fn random_crop(image: &Image, size: usize, rng: &mut impl Rng) -> Image {
    let top = rng.random_range(0..=image.height - size);
    let left = rng.random_range(0..=image.width - size);
    let view = image.crop(top, left, size, size);
    if rng.random_bool(0.5) {
        view.flip_horizontal()
    } else {
        view
    }
}

/// Two global crops followed by `num_local_views` local crops. Each crop is
/// a uniformly placed square window, mirrored with probability one half.
pub fn multi_crop(image: &Image, config: &DistillConfig, rng: &mut impl Rng) -> Result<Vec<Image>, DistillError> {
    let largest = config.global_size.max(config.local_size);
    if image.height < largest || image.width < largest {
        return Err(DistillError::ImageTooSmall {
            height: image.height,
            width: image.width,
            size: largest,
        });
    }
    let mut views = Vec::with_capacity(config.num_views());
    for _ in 0..2 {
        views.push(random_crop(image, config.global_size, rng));
    }
    for _ in 0..config.num_local_views {
        views.push(random_crop(image, config.local_size, rng));
    }
    Ok(views)
}
