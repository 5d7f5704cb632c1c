/// Dense channels-first activation tensor for a single sample: `C×D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Tensor {
            channels,
            dims,
            data,
        }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}
