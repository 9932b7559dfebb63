/// Channel-major (C×H×W) image with f64 intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (channels * height * width == data.len() && !data.is_empty()).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width]).expect("non-empty")
    }

    /// Maps u8 intensities to [-1, 1].
    pub fn from_u8(channels: usize, height: usize, width: usize, pixels: &[u8]) -> Option<Self> {
        let data = pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
        Self::new(channels, height, width, data)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Axis-aligned subwindow. Panics if the window leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Self::new(self.channels, height, width, data).expect("non-empty crop")
    }

    /// Centered `size`×`size` window, or the image itself when it already fits.
    pub fn center_crop(&self, size: usize) -> Self {
        if self.height <= size && self.width <= size {
            return self.clone();
        }
        let h = size.min(self.height);
        let w = size.min(self.width);
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }
}
