//! Pixel-space video clips: `frames × height × width × channels`, row-major, values in `[0, 1]`.

use crate::error::{Error, Result};
use candle_core::{Device, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn from_vec(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "video data has {} values, expected {frames}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a clip from a list of equally sized frames.
    pub fn from_frames(height: usize, width: usize, channels: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let per = height * width * channels;
        let mut data = Vec::with_capacity(per * frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.len() != per {
                return Err(Error::Shape(format!("frame {i} has {} values, expected {per}", f.len())));
            }
            data.extend_from_slice(f);
        }
        Self::from_vec(frames.len(), height, width, channels, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    /// Contiguous sub-range of frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames {
            return Err(Error::Shape(format!(
                "frame range [{start}, {end}) outside clip of {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        Self::from_vec(
            end - start,
            self.height,
            self.width,
            self.channels,
            self.data[start * n..end * n].to_vec(),
        )
    }

    /// Same frames in reverse temporal order.
    pub fn reversed(&self) -> Self {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.frames).rev() {
            data.extend_from_slice(&self.data[t * n..(t + 1) * n]);
        }
        Self { data, ..*self }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `(frames, height, width, channels)` tensor on the CPU.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.dims(), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (f, h, w, c) = t.dims4()?;
        let data = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        Self::from_vec(f, h, w, c, data)
    }
}

/// Time-reversed copy of a clip.
pub fn reverse_clip(clip: &VideoClip) -> VideoClip {
    clip.reversed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reverse_three_frames() {
        let clip = VideoClip::from_vec(3, 1, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reverse_clip(&clip).data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn repeated_frame_is_fixed_point() {
        let clip = VideoClip::from_vec(4, 2, 1, 1, vec![0.5, 0.25].repeat(4)).unwrap();
        assert_eq!(reverse_clip(&clip), clip);
    }

    proptest! {
        #[test]
        fn double_reversal_is_identity(frames in 1usize..6, data in proptest::collection::vec(0f32..1.0, 6*2*2*3)) {
            let data = data[..frames * 12].to_vec();
            let clip = VideoClip::from_vec(frames, 2, 2, 3, data).unwrap();
            prop_assert_eq!(clip.reversed().reversed(), clip);
        }
    }
}
