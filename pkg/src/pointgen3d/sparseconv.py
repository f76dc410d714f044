"""Sparse 3D convolutions on voxel hash grids, implemented with dense torch ops.

A :class:`SparseTensor` keeps (batch, ix, iy, iz) coordinates sorted by their
raveled key, so neighbor lookups are binary searches and every op is a
gather / matmul / scatter-add, which keeps autograd intact without custom
kernels. Kernel size is fixed at 3 with padding 1; strided convs use stride 2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

KERNEL_SIZE = 3
KERNEL_VOLUME = KERNEL_SIZE ** 3


def ravel_keys(indices: torch.Tensor, spatial_shape, batch_size: int) -> torch.Tensor:
    """Ravel (batch, ix, iy, iz) rows to scalar keys, x-major within a batch."""
    sx, sy, sz = (int(s) for s in spatial_shape)
    b, x, y, z = indices.unbind(1)
    return ((b * sx + x) * sy + y) * sz + z


@dataclass
class SparseTensor:
    """Batched sparse voxel tensor.

    indices: (N, 4) int64 rows (batch, ix, iy, iz), sorted by raveled key.
    features: (N, C) float tensor, rows aligned with ``indices``.
    stride: downsampling factor of this tensor relative to the base grid.
    origin / base_voxel_size: world-frame metadata of the base grid.
    """

    features: torch.Tensor
    indices: torch.Tensor
    spatial_shape: tuple
    batch_size: int
    stride: int = 1
    origin: tuple = (0.0, 0.0, 0.0)
    base_voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.indices.shape[0] != self.features.shape[0]:
            raise ValueError("indices and features disagree on voxel count")
        keys = ravel_keys(self.indices, self.spatial_shape, self.batch_size)
        if keys.numel() and not bool((keys[1:] > keys[:-1]).all()):
            order = torch.argsort(keys)
            object.__setattr__(self, "indices", self.indices[order])
            object.__setattr__(self, "features", self.features[order])

    @property
    def keys(self) -> torch.Tensor:
        return ravel_keys(self.indices, self.spatial_shape, self.batch_size)

    def replace_features(self, features: torch.Tensor) -> "SparseTensor":
        if features.shape[0] != self.indices.shape[0]:
            raise ValueError("feature rows must match voxel count")
        return replace(self, features=features)

    def voxel_size(self) -> tuple:
        return tuple(v * self.stride for v in self.base_voxel_size)

    def voxel_centers(self) -> torch.Tensor:
        """World-frame centers of the occupied voxels, (N, 3) float32."""
        vs = self.indices.new_tensor(self.voxel_size(), dtype=torch.float32)
        org = self.indices.new_tensor(self.origin, dtype=torch.float32)
        return org + (self.indices[:, 1:].float() + 0.5) * vs

    def dense(self) -> torch.Tensor:
        """Densify to (B, C, X, Y, Z)."""
        b = self.batch_size
        sx, sy, sz = self.spatial_shape
        c = self.features.shape[1]
        out = self.features.new_zeros(b * sx * sy * sz, c)
        if self.indices.shape[0]:
            out.index_copy_(0, self.keys, self.features)
        return out.view(b, sx, sy, sz, c).permute(0, 4, 1, 2, 3).contiguous()

    def bev(self) -> torch.Tensor:
        """Collapse Z into channels: (B, C * Z, X, Y)."""
        d = self.dense()
        b, c, sx, sy, sz = d.shape
        return d.permute(0, 1, 4, 2, 3).reshape(b, c * sz, sx, sy)


def from_voxel_grids(grids, origin, base_voxel_size, device=None) -> SparseTensor:
    """Collate per-scene voxel grids (numpy indices/features) into one tensor."""
    if not grids:
        raise ValueError("need at least one voxel grid")
    shape = grids[0].spatial_shape
    idx_rows, feat_rows = [], []
    for b, g in enumerate(grids):
        if tuple(g.spatial_shape) != tuple(shape):
            raise ValueError("voxel grids in a batch must share spatial_shape")
        n = g.indices.shape[0]
        rows = np.concatenate(
            [np.full((n, 1), b, dtype=np.int64), g.indices.astype(np.int64)], axis=1
        )
        idx_rows.append(rows)
        feat_rows.append(g.features)
    indices = torch.from_numpy(np.concatenate(idx_rows, axis=0))
    features = torch.from_numpy(np.concatenate(feat_rows, axis=0).astype(np.float32))
    if device is not None:
        indices = indices.to(device)
        features = features.to(device)
    return SparseTensor(
        features=features,
        indices=indices,
        spatial_shape=tuple(shape),
        batch_size=len(grids),
        stride=1,
        origin=tuple(origin),
        base_voxel_size=tuple(base_voxel_size),
    )


def _kernel_offsets(device):
    """(27, 3) int64 kernel taps in x-major order, values in {0, 1, 2}."""
    r = torch.arange(KERNEL_SIZE, device=device)
    return torch.stack(torch.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)


def _gather_scatter(st, out_keys, out_shape, weight, stride):
    """Shared conv body: out[o] = sum_k W[k] @ in[stride * o + k - 1].

    All 27 kernel taps are resolved in one searchsorted pass; the per-slot
    loop only runs the slot matmuls over contiguous hit ranges.
    """
    n_out = out_keys.shape[0]
    out_ch = weight.shape[2]
    feats = st.features
    out = feats.new_zeros(n_out, out_ch)
    n_in = st.indices.shape[0]
    if n_in == 0 or n_out == 0:
        return out
    taps = _kernel_offsets(st.indices.device)
    pos = st.indices[:, 1:]
    batch = st.indices[:, 0]
    ox, oy, oz = (int(s) for s in out_shape)
    t = pos.unsqueeze(0) + (1 - taps).unsqueeze(1)  # (27, N, 3)
    if stride == 1:
        tgt = t
        valid = (tgt >= 0).all(-1)
    else:
        valid = (t % stride == 0).all(-1)
        tgt = torch.div(t, stride, rounding_mode="floor")
        valid &= (tgt >= 0).all(-1)
    valid &= (tgt[..., 0] < ox) & (tgt[..., 1] < oy) & (tgt[..., 2] < oz)
    keys = ((batch.unsqueeze(0) * ox + tgt[..., 0]) * oy
            + tgt[..., 1]) * oz + tgt[..., 2]
    loc = torch.searchsorted(out_keys, keys.reshape(-1)).clamp(max=n_out - 1)
    # out-of-window taps can alias real keys, so gate the match on validity
    hit = (out_keys[loc] == keys.reshape(-1)) & valid.reshape(-1)
    if not bool(hit.any()):
        return out
    flat = hit.nonzero(as_tuple=True)[0]
    slot_ids = flat // n_in
    in_rows = flat % n_in
    # unfold into per-output patch rows, then apply all taps as one matmul;
    # each (output, slot) cell receives at most one input so index_add
    # never collides
    patches = feats.new_zeros(n_out * KERNEL_VOLUME, weight.shape[1])
    patches = patches.index_add(0, loc[flat] * KERNEL_VOLUME + slot_ids,
                                feats[in_rows])
    return patches.view(n_out, -1) @ weight.view(-1, out_ch)


class _SparseConvBase(nn.Module):
    def __init__(self, in_channels, out_channels, bias):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(
            torch.empty(KERNEL_VOLUME, in_channels, out_channels)
        )
        bound = 1.0 / (in_channels * KERNEL_VOLUME) ** 0.5
        nn.init.uniform_(self.weight, -bound, bound)
        if bias:
            self.bias = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("bias", None)


class SubMConv3d(_SparseConvBase):
    """Submanifold 3x3x3 convolution: output sites equal input sites."""

    def __init__(self, in_channels, out_channels, bias=False):
        super().__init__(in_channels, out_channels, bias)

    def forward(self, st: SparseTensor) -> SparseTensor:
        out = _gather_scatter(st, st.keys, st.spatial_shape, self.weight, stride=1)
        if self.bias is not None:
            out = out + self.bias
        return st.replace_features(out)


class SparseConv3d(_SparseConvBase):
    """Strided 3x3x3 convolution (stride 2, padding 1) that downsamples the grid."""

    def __init__(self, in_channels, out_channels, bias=False):
        super().__init__(in_channels, out_channels, bias)
        self.stride = 2

    def out_shape(self, spatial_shape) -> tuple:
        return tuple((int(s) - 1) // self.stride + 1 for s in spatial_shape)

    def forward(self, st: SparseTensor) -> SparseTensor:
        out_shape = self.out_shape(st.spatial_shape)
        pos = st.indices[:, 1:]
        taps = _kernel_offsets(st.indices.device)
        # Output site exists wherever any input falls under the kernel window.
        t = pos.unsqueeze(0) + (1 - taps).unsqueeze(1)  # (27, N, 3)
        valid = (t % self.stride == 0).all(-1)
        tgt = torch.div(t, self.stride, rounding_mode="floor")
        valid &= (tgt >= 0).all(-1)
        for d in range(3):
            valid &= tgt[..., d] < out_shape[d]
        batch = st.indices[:, 0].unsqueeze(0).expand(KERNEL_VOLUME, -1)
        cand = torch.cat(
            [batch[valid].unsqueeze(1), tgt[valid]], dim=1
        )
        if cand.shape[0]:
            out_keys = torch.unique(ravel_keys(cand, out_shape, st.batch_size))
        else:
            out_keys = st.indices.new_zeros((0,))
        out = _gather_scatter(st, out_keys, out_shape, self.weight, self.stride)
        if self.bias is not None:
            out = out + self.bias
        sx, sy, sz = (int(s) for s in out_shape)
        b = torch.div(out_keys, sx * sy * sz, rounding_mode="floor")
        rem = out_keys - b * (sx * sy * sz)
        ix = torch.div(rem, sy * sz, rounding_mode="floor")
        rem = rem - ix * (sy * sz)
        iy = torch.div(rem, sz, rounding_mode="floor")
        iz = rem - iy * sz
        indices = torch.stack([b, ix, iy, iz], dim=1)
        return SparseTensor(
            features=out,
            indices=indices,
            spatial_shape=out_shape,
            batch_size=st.batch_size,
            stride=st.stride * self.stride,
            origin=st.origin,
            base_voxel_size=st.base_voxel_size,
        )


class SparseBatchNormReLU(nn.Module):
    """BatchNorm1d + ReLU applied to the feature rows of a SparseTensor."""

    def __init__(self, channels, eps=1e-3, momentum=0.01):
        super().__init__()
        self.bn = nn.BatchNorm1d(channels, eps=eps, momentum=momentum)

    def forward(self, st: SparseTensor) -> SparseTensor:
        if st.features.shape[0] == 0:
            return st
        return st.replace_features(torch.relu(self.bn(st.features)))
