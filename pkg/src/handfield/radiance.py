"""Canonical radiance field: density from integrated encodings, view/latent-conditioned color and features."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .deformation import CanonicalBox
from .mathcore import FrustumGaussian, integrated_positional_encoding, positional_encoding
from .nn import MlpSpec, ParameterStore, init_mlp, mlp_forward

NOVEL = "novel"


@dataclass
class FieldConfig:
    pos_degree: int = 10
    dir_degree: int = 4
    width: int = 128
    depth: int = 4
    skip: int = 2
    color_width: int = 64
    color_depth: int = 2
    latent_dim: int = 8
    feature_dim: int = 16
    sigma_bias: float = 0.0
    activation: str = "relu"  # hidden activation; a smooth choice makes finite differences well posed

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def density_spec(self) -> MlpSpec:
        skips = (self.skip,) if 0 < self.skip < self.depth else ()
        return MlpSpec(
            (6 * self.pos_degree,) + (self.width,) * self.depth,
            activation=self.activation, output_activation=self.activation, skips=skips,
        )

    def color_spec(self) -> MlpSpec:
        n_in = 6 * self.dir_degree + self.width + self.latent_dim
        return MlpSpec((n_in,) + (self.color_width,) * self.color_depth, activation=self.activation, output_activation=self.activation)


class CanonicalField:
    """Parameter stores for density, color and the per-frame latent table."""

    def __init__(self, config: FieldConfig, frame_ids, box: CanonicalBox, dtype=torch.float32, seed: int = 0):
        self.config = config
        self.box = box
        self.frame_ids = [int(f) for f in frame_ids]
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ValueError("duplicate training frame ids")
        self._row = {f: i for i, f in enumerate(self.frame_ids)}
        self.dtype = dtype
        g = torch.Generator().manual_seed(seed)
        self.density_store = ParameterStore(dtype)
        self.color_store = ParameterStore(dtype)
        self.latent_store = ParameterStore(dtype)
        init_mlp(config.density_spec(), self.density_store, "density", g)
        init_mlp(MlpSpec((config.width, 1)), self.density_store, "sigma", g)
        self.density_store["sigma.0.bias"].data.fill_(config.sigma_bias)
        init_mlp(config.color_spec(), self.color_store, "color", g)
        init_mlp(MlpSpec((config.color_width, 3)), self.color_store, "rgb", g)
        init_mlp(MlpSpec((config.color_width, config.feature_dim)), self.color_store, "feature", g)
        latent = 0.01 * torch.randn(max(len(self.frame_ids), 1), config.latent_dim, generator=g, dtype=torch.float64)
        self.latent_store.add("latent", latent[: len(self.frame_ids)].numpy())
        self.latent_reads: list = []

    @property
    def stores(self) -> dict[str, ParameterStore]:
        return {"density": self.density_store, "color": self.color_store, "latent": self.latent_store}

    def density(self, mean_n, var_n):
        """Density and density feature from normalized mean (n, 3) and per-axis variance (n, 3)."""
        enc = integrated_positional_encoding(mean_n, var_n, self.config.pos_degree)
        f_sigma = mlp_forward(self.config.density_spec(), self.density_store, enc, "density")[0]
        raw = mlp_forward(MlpSpec((self.config.width, 1)), self.density_store, f_sigma, "sigma")[0]
        return F.softplus(raw[..., 0]), f_sigma

    def latent(self, frame):
        """Latent code for a training frame id, or the mean code for ``NOVEL``/None."""
        table = self.latent_store["latent"]
        if frame is None or frame == NOVEL:
            self.latent_reads.append(NOVEL)
            if table.shape[0] == 0:
                return torch.zeros(self.config.latent_dim, dtype=self.dtype)
            return table.mean(0)
        try:
            row = self._row[int(frame)]
        except (KeyError, ValueError, TypeError):
            raise KeyError(f"unknown frame id {frame!r}") from None
        self.latent_reads.append(int(frame))
        return table[row]

    def color(self, directions, f_sigma, frame):
        """Color in [0, 1] and color feature for unit view directions (n, 3)."""
        d = torch.as_tensor(directions, dtype=self.dtype)
        code = self.latent(frame)
        inp = torch.cat(
            [positional_encoding(d, self.config.dir_degree), f_sigma, code.expand(len(d), -1)], dim=-1
        )
        h = mlp_forward(self.config.color_spec(), self.color_store, inp, "color")[0]
        w = self.config.color_width
        c = torch.sigmoid(mlp_forward(MlpSpec((w, 3)), self.color_store, h, "rgb")[0])
        f_c = mlp_forward(MlpSpec((w, self.config.feature_dim)), self.color_store, h, "feature")[0]
        return c, f_c

    def query_density(self, g: FrustumGaussian | list):
        """Density for canonical Gaussians in scene units (single or list)."""
        gs = [g] if isinstance(g, FrustumGaussian) else list(g)
        mean = torch.as_tensor(np.stack([x.mean for x in gs]), dtype=self.dtype)
        var = torch.as_tensor(np.stack([np.diag(x.cov) for x in gs]), dtype=self.dtype)
        sigma, f = self.density(self.box.normalize(mean), self.box.normalize_var(var))
        if isinstance(g, FrustumGaussian):
            return sigma[0], f[0]
        return sigma, f

    def query_color(self, d, f_sigma, frame):
        single = f_sigma.ndim == 1
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        c, f_c = self.color(d, f_sigma[None] if single else f_sigma, frame)
        return (c[0], f_c[0]) if single else (c, f_c)


def query_density(field: CanonicalField, g):
    return field.query_density(g)


def query_color(field: CanonicalField, d, f_sigma, frame):
    return field.query_color(d, f_sigma, frame)
