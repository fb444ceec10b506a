"""Shared building blocks: FFT blocks, masked normalisation, conv stacks."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def lengths_to_mask(lengths, max_len=None):
    """[B] lengths -> [B, max_len] bool mask, True on valid positions."""
    lengths = torch.as_tensor(lengths)
    max_len = int(max_len if max_len is not None else lengths.max())
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoid_table(n_positions, dim):
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    idx = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, 2 * torch.div(idx, 2, rounding_mode="floor") / dim)
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle[:, 0::2])
    table[:, 1::2] = torch.cos(angle[:, 1::2])
    return table.float()


class MaskedGroupNorm(nn.Module):
    """GroupNorm over [B, C, T] whose statistics ignore padded frames.

    With an all-true mask it matches ``nn.GroupNorm``.
    """

    def __init__(self, num_groups, num_channels, eps=1e-5):
        super().__init__()
        if num_channels % num_groups:
            raise ValueError(f"{num_groups} groups do not divide {num_channels} channels")
        self.num_groups = num_groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))

    def forward(self, x, mask):
        B, C, T = x.shape
        G = self.num_groups
        xg = x.view(B, G, C // G, T)
        m = mask.to(x.dtype).view(B, 1, 1, T)
        count = m.sum(dim=(2, 3), keepdim=True) * (C // G)
        mean = (xg * m).sum(dim=(2, 3), keepdim=True) / count
        var = (((xg - mean) * m) ** 2).sum(dim=(2, 3), keepdim=True) / count
        xg = (xg - mean) / torch.sqrt(var + self.eps)
        x = xg.view(B, C, T) * self.weight.view(1, C, 1) + self.bias.view(1, C, 1)
        return x * mask.to(x.dtype).unsqueeze(1)


class PositionwiseConvFF(nn.Module):
    def __init__(self, dim, filter_dim, kernels=(9, 1), dropout=0.1):
        super().__init__()
        self.w1 = nn.Conv1d(dim, filter_dim, kernels[0], padding=(kernels[0] - 1) // 2)
        self.w2 = nn.Conv1d(filter_dim, dim, kernels[1], padding=(kernels[1] - 1) // 2)
        self.norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: [B, N, D]; mask: [B, N]
        keep = mask.unsqueeze(-1).to(x.dtype)
        residual = x
        h = (x * keep).transpose(1, 2)
        h = F.relu(self.w1(h)) * keep.transpose(1, 2)
        h = self.w2(h).transpose(1, 2)
        return self.norm(self.dropout(h) + residual)


class FFTBlock(nn.Module):
    """Feed-Forward Transformer block: self-attention then conv feed-forward."""

    def __init__(self, dim, heads, filter_dim, kernels=(9, 1), dropout=0.1):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.attn_norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)
        self.ff = PositionwiseConvFF(dim, filter_dim, kernels, dropout)

    def forward(self, x, mask):
        keep = mask.unsqueeze(-1).to(x.dtype)
        h, _ = self.attn(x, x, x, key_padding_mask=~mask, need_weights=False)
        x = self.attn_norm(x + self.dropout(h)) * keep
        return self.ff(x, mask) * keep


class FFTStack(nn.Module):
    def __init__(self, n_blocks, dim, heads, filter_dim, kernels=(9, 1), dropout=0.1, max_positions=4096):
        super().__init__()
        self.register_buffer("positions", sinusoid_table(max_positions, dim), persistent=False)
        self.blocks = nn.ModuleList(
            FFTBlock(dim, heads, filter_dim, kernels, dropout) for _ in range(n_blocks)
        )

    def forward(self, x, mask):
        n = x.shape[1]
        if n > self.positions.shape[0]:
            self.register_buffer(
                "positions", sinusoid_table(n, x.shape[-1]).to(x.device), persistent=False
            )
        x = (x + self.positions[:n].unsqueeze(0)) * mask.unsqueeze(-1).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return x


class ConvNormStack(nn.Module):
    """``n_layers`` x (conv -> masked group norm -> ReLU -> dropout) at frame rate."""

    def __init__(self, in_dim, dim, n_layers=3, kernel=5, groups=16, dropout=0.1):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(n_layers):
            self.convs.append(nn.Conv1d(in_dim if i == 0 else dim, dim, kernel, padding=(kernel - 1) // 2))
            self.norms.append(MaskedGroupNorm(groups, dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: [B, T, C_in] -> [B, T, dim]
        keep = mask.unsqueeze(1).to(x.dtype)
        h = x.transpose(1, 2) * keep
        for conv, norm in zip(self.convs, self.norms):
            h = self.dropout(F.relu(norm(conv(h), mask))) * keep
        return h.transpose(1, 2)


def init_linear(module, gain=1.0):
    nn.init.xavier_uniform_(module.weight, gain=gain)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
