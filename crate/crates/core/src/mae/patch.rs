use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{GridDims, Volume4D};

/// Tiling of a 4D grid into non-overlapping `px × py × pz × pt` patches.
///
/// Tokens are ordered x-fastest over the token grid; elements inside a token
/// are ordered x-fastest over the patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSpec {
    patch: [usize; 4],
    dims: GridDims,
    origins: Vec<usize>,
    offsets: Vec<usize>,
}

impl PatchSpec {
    pub fn new(dims: GridDims, patch: [usize; 4]) -> Result<Self> {
        let shape = dims.shape();
        for a in 0..4 {
            if patch[a] == 0 || !shape[a].is_multiple_of(patch[a]) {
                return Err(Error::invalid(format!(
                    "patch {patch:?} does not divide grid {shape:?}"
                )));
            }
        }
        let grid = [0, 1, 2, 3].map(|a| shape[a] / patch[a]);
        let mut origins = Vec::with_capacity(grid.iter().product());
        for tt in 0..grid[3] {
            for tz in 0..grid[2] {
                for ty in 0..grid[1] {
                    for tx in 0..grid[0] {
                        origins.push(dims.index_unchecked(
                            tx * patch[0],
                            ty * patch[1],
                            tz * patch[2],
                            tt * patch[3],
                        ));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(patch.iter().product());
        for dt in 0..patch[3] {
            for dz in 0..patch[2] {
                for dy in 0..patch[1] {
                    for dx in 0..patch[0] {
                        offsets.push(dims.index_unchecked(dx, dy, dz, dt));
                    }
                }
            }
        }
        Ok(PatchSpec {
            patch,
            dims,
            origins,
            offsets,
        })
    }

    pub fn patch(&self) -> [usize; 4] {
        self.patch
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    /// Token counts along x, y, z, t.
    pub fn token_grid(&self) -> [usize; 4] {
        let s = self.dims.shape();
        [0, 1, 2, 3].map(|a| s[a] / self.patch[a])
    }

    pub fn n_tokens(&self) -> usize {
        self.origins.len()
    }

    pub fn d_patch(&self) -> usize {
        self.offsets.len()
    }

    /// Linear voxel indices covered by token `token`, in element order.
    #[inline]
    pub fn voxel_indices(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        let o = self.origins[token];
        self.offsets.iter().map(move |off| o + off)
    }

    fn check(&self, dims: GridDims) -> Result<()> {
        if dims != self.dims {
            return Err(Error::dims(self.dims, dims));
        }
        Ok(())
    }

    /// `n_tokens × d_patch` row-major token matrix.
    pub fn patchify<T: Scalar>(&self, vol: &Volume4D<T>) -> Result<Vec<T>> {
        self.check(vol.dims())?;
        let data = vol.data();
        let mut out = Vec::with_capacity(data.len());
        for token in 0..self.n_tokens() {
            out.extend(self.voxel_indices(token).map(|i| data[i]));
        }
        Ok(out)
    }

    /// Scatters a token matrix back onto a volume with `like`'s metadata.
    pub fn unpatchify<T: Scalar>(&self, tokens: &[T], like: &Volume4D<T>) -> Result<Volume4D<T>> {
        self.check(like.dims())?;
        if tokens.len() != self.dims.len() {
            return Err(Error::dims(self.dims.len(), tokens.len()));
        }
        let mut data = vec![T::zero(); tokens.len()];
        for (token, row) in tokens.chunks_exact(self.d_patch()).enumerate() {
            for (i, v) in self.voxel_indices(token).zip(row) {
                data[i] = *v;
            }
        }
        like.like(self.dims, data)
    }
}
