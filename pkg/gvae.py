"""Graph-convolutional VAE over a coarsening hierarchy, B-spline kernels on edge pseudo-coordinates."""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from errors import GeometryError, TrainingError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOGVAR_LIMIT = 20.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError('learning rate must be positive')
        if self.batch_size < 1:
            raise ValueError('batch size must be at least 1')
        if self.epochs < 0:
            raise ValueError('epochs must be non-negative')


@dataclass(frozen=True)
class Architecture:
    latent_dim: int = 2
    channels: tuple = (16, 32, 64)
    kernel_size: tuple = (5, 5, 5)
    degree: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError('latent dimension must be at least 1')
        if any(k <= self.degree for k in self.kernel_size):
            raise ValueError('every kernel size must exceed the spline degree')
        object.__setattr__(self, 'channels', tuple(self.channels))
        object.__setattr__(self, 'kernel_size', tuple(self.kernel_size))

    def to_dict(self):
        return {key: list(value) if isinstance(value, tuple) else value
                for key, value in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class LatentGaussian:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class TrainResult:
    model: 'GVae'
    history: list  # dicts with epoch, train_loss, val_loss


def open_knots(k, m):
    return np.concatenate([np.zeros(m), np.linspace(0.0, 1.0, k - m + 1), np.ones(m)])


def _basis_1d(v, m, k):
    """Nonzero open-uniform B-spline values at v: (E, m+1) values and first basis index."""
    knots = open_knots(k, m)
    span = np.clip(np.searchsorted(knots, v, side='right') - 1, m, k - 1)
    values = np.zeros((v.shape[0], m + 1))
    values[:, 0] = 1.0
    left = np.zeros((v.shape[0], m + 1))
    right = np.zeros((v.shape[0], m + 1))
    for j in range(1, m + 1):
        left[:, j] = v - knots[span + 1 - j]
        right[:, j] = knots[span + j] - v
        saved = np.zeros(v.shape[0])
        for r in range(j):
            temp = values[:, r] / (right[:, r + 1] + left[:, j - r])
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved
    return values, span - m


def bspline_basis(v, m=1, k=(5, 5, 5)):
    """Control-point indices and weights of the tensor-product basis at pseudo-coordinates v.

    Returns (index, weight) arrays of shape (E, (m+1)**3); for a single triple the leading
    axis is dropped. Control point (i1, i2, i3) has flat index (i1 * k2 + i2) * k3 + i3.
    The active set has this fixed size for every triple, so on knots some weights are exactly
    zero; spline_operator leaves those out of the sparse operator.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if v.shape[1] != 3:
        raise ValueError('pseudo-coordinates must be triples')
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError('pseudo-coordinates must lie in [0, 1]^3')
    per_dim = [_basis_1d(v[:, d], m, k[d]) for d in range(3)]
    index = np.zeros((v.shape[0], 1), dtype=np.int64)
    weight = np.ones((v.shape[0], 1))
    for d, (values, first) in enumerate(per_dim):
        offsets = first[:, None] + np.arange(m + 1)[None, :]
        index = (index[:, :, None] * k[d] + offsets[:, None, :]).reshape(v.shape[0], -1)
        weight = (weight[:, :, None] * values[:, None, :]).reshape(v.shape[0], -1)
    if single:
        return index[0], weight[0]
    return index, weight


def spline_operator(graph, m, k):
    """Sparse (K*N, N) map X -> per-control-point neighbour averages."""
    n = graph.size
    n_points = int(np.prod(k))
    if graph.n_edges == 0:
        return torch.sparse_coo_tensor(torch.zeros((2, 0), dtype=torch.long),
                                       torch.zeros(0, dtype=DTYPE), (n_points * n, n)).coalesce()
    index, weight = bspline_basis(graph.pseudo, m, k)
    targets, sources = graph.edges[:, 0], graph.edges[:, 1]
    degree = np.bincount(targets, minlength=n).astype(np.float64)
    scaled = weight / degree[targets][:, None]
    rows = (index * n + targets[:, None]).reshape(-1)
    cols = np.repeat(sources, index.shape[1])
    keep = scaled.reshape(-1) != 0.0
    indices = torch.as_tensor(np.stack([rows[keep], cols[keep]]), dtype=torch.long)
    values = torch.as_tensor(scaled.reshape(-1)[keep], dtype=DTYPE)
    return torch.sparse_coo_tensor(indices, values, (n_points * n, n)).coalesce()


def _uniform_(tensor, fan_in, fan_out, generator):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class SplineConv(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=(5, 5, 5), degree=1, generator=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = tuple(kernel_size)
        self.degree = degree
        n_points = int(np.prod(kernel_size))
        self.weight = nn.Parameter(torch.empty(n_points, in_channels, out_channels, dtype=DTYPE))
        self.root = nn.Parameter(torch.empty(in_channels, out_channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=DTYPE))
        _uniform_(self.weight, n_points * in_channels, n_points * out_channels, generator)
        _uniform_(self.root, in_channels, out_channels, generator)

    def forward(self, x, operator):
        """x: (B, N, M) -> (B, N, O)."""
        batch, n, m = x.shape
        if m != self.in_channels:
            raise ValueError(f'expected {self.in_channels} input channels, got {m}')
        flat = x.permute(1, 0, 2).reshape(n, batch * m)
        gathered = torch.sparse.mm(operator, flat).view(-1, n, batch, m)
        out = torch.einsum('knbm,kmo->bno', gathered, self.weight)
        return out + x @ self.root + self.bias


def spline_conv(graph, features, layer):
    """Single-graph convolution of (N, M) features."""
    operator = spline_operator(graph, layer.degree, layer.kernel_size)
    x = torch.as_tensor(features, dtype=DTYPE)
    return layer(x.unsqueeze(0), operator)[0]


class HierarchyOperators:
    """Spline and pooling operators of every level, rebuilt per geometry."""

    def __init__(self, hierarchy, kernel_size, degree):
        self.checksum = hierarchy.checksum()
        self.sizes = hierarchy.sizes
        self.spline = [spline_operator(g, degree, kernel_size) for g in hierarchy.graphs]
        self.pool = [torch.as_tensor(a.normalized().T.toarray(), dtype=DTYPE) for a in hierarchy.assignments]
        self.unpool = [torch.as_tensor(a.to_sparse().toarray(), dtype=DTYPE) for a in hierarchy.assignments]


class GVae(nn.Module):
    def __init__(self, hierarchy, architecture=None):
        super().__init__()
        self.architecture = architecture or Architecture()
        arch = self.architecture
        if len(arch.channels) != hierarchy.depth:
            raise GeometryError(
                f'{len(arch.channels)} encoder levels need a hierarchy of depth {len(arch.channels)}, '
                f'got {hierarchy.depth}')
        generator = torch.Generator().manual_seed(arch.seed)
        widths = (1,) + arch.channels
        self.encoder = nn.ModuleList(
            SplineConv(widths[i], widths[i + 1], arch.kernel_size, arch.degree, generator)
            for i in range(len(arch.channels)))
        self.head = nn.Linear(arch.channels[-1], 2 * arch.latent_dim, dtype=DTYPE)
        _uniform_(self.head.weight, arch.channels[-1], 2 * arch.latent_dim, generator)
        nn.init.zeros_(self.head.bias)
        # decoder step l runs on graph l + 1 and maps channels[l] -> channels[max(l - 1, 0)] before unpooling
        self.decoder = nn.ModuleList(
            SplineConv(arch.channels[level], arch.channels[max(level - 1, 0)],
                       arch.kernel_size, arch.degree, generator)
            for level in reversed(range(len(arch.channels))))
        self.output = SplineConv(arch.channels[0], 1, arch.kernel_size, arch.degree, generator)
        self._generator = generator
        self.expand = None
        self.attach(hierarchy)

    def attach(self, hierarchy):
        """Bind the model to a geometry; the z -> coarsest map is rebuilt if its size changes."""
        if hierarchy.depth != len(self.architecture.channels):
            raise GeometryError(
                f'hierarchy depth {hierarchy.depth} does not match the model depth '
                f'{len(self.architecture.channels)}')
        arch = self.architecture
        self.ops = HierarchyOperators(hierarchy, arch.kernel_size, arch.degree)
        width = arch.channels[-1] * self.ops.sizes[-1]
        if self.expand is None or self.expand.out_features != width:
            self.expand = nn.Linear(arch.latent_dim, width, dtype=DTYPE)
            _uniform_(self.expand.weight, arch.latent_dim, width, self._generator)
            nn.init.zeros_(self.expand.bias)
        return self

    @property
    def n_vertices(self):
        return self.ops.sizes[0]

    @property
    def hierarchy_checksum(self):
        return self.ops.checksum

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def encode(self, theta):
        theta = torch.as_tensor(theta, dtype=DTYPE)
        single = theta.dim() == 1
        x = theta.reshape(-1, theta.shape[-1])
        if x.shape[1] != self.n_vertices:
            raise ValueError(f'field has {x.shape[1]} values, model expects {self.n_vertices}')
        x = x.unsqueeze(-1)
        for level, conv in enumerate(self.encoder):
            x = nn.functional.elu(conv(x, self.ops.spline[level]))
            x = self.ops.pool[level] @ x
        stats = self.head(x.mean(dim=1))
        q = self.architecture.latent_dim
        mu, logvar = stats[:, :q], stats[:, q:].clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)
        if single:
            mu, logvar = mu[0], logvar[0]
        return LatentGaussian(mu, logvar)

    def decode(self, z):
        """Decoder mean, values in (0, 1)."""
        z = torch.as_tensor(z, dtype=DTYPE)
        single = z.dim() == 1
        z = z.reshape(-1, z.shape[-1])
        if z.shape[1] != self.architecture.latent_dim:
            raise ValueError(f'latent code has length {z.shape[1]}, expected {self.architecture.latent_dim}')
        depth = len(self.architecture.channels)
        x = self.expand(z).view(z.shape[0], self.ops.sizes[-1], self.architecture.channels[-1])
        for conv, level in zip(self.decoder, reversed(range(depth))):
            x = nn.functional.elu(conv(x, self.ops.spline[level + 1]))
            x = self.ops.unpool[level] @ x
        theta = torch.sigmoid(self.output(x, self.ops.spline[0])).squeeze(-1)
        return theta[0] if single else theta

    def forward(self, theta, eps):
        latent = self.encode(theta)
        return self.decode(reparameterize(latent, eps)), latent

    def decode_numpy(self, z):
        with torch.no_grad():
            return self.decode(torch.as_tensor(np.asarray(z), dtype=DTYPE)).numpy()

    def encode_mean_numpy(self, theta):
        with torch.no_grad():
            return self.encode(torch.as_tensor(np.asarray(theta), dtype=DTYPE)).mu.numpy()


def reparameterize(latent, eps):
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if eps.shape != latent.mu.shape:
        raise ValueError(f'noise shape {tuple(eps.shape)} does not match {tuple(latent.mu.shape)}')
    return latent.mu + torch.exp(0.5 * latent.logvar) * eps


def kl_divergence(latent):
    """Closed-form KL(q(z|theta) || N(0, I)) per sample."""
    return 0.5 * torch.sum(latent.mu ** 2 + torch.exp(latent.logvar) - 1.0 - latent.logvar, dim=-1)


def elbo_loss(theta, theta_hat, latent, kl_weight=1.0):
    """Negative ELBO (unit-variance Gaussian decoder), averaged over the batch."""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    if theta.shape != theta_hat.shape:
        raise ValueError(f'shape mismatch {tuple(theta.shape)} vs {tuple(theta_hat.shape)}')
    recon = torch.sum((theta - theta_hat) ** 2, dim=-1)
    return torch.mean(recon + kl_weight * kl_divergence(latent))


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def _mean_loss(model, fields, kl_weight):
    """Loss with z at the posterior mean, so validation curves are noise free."""
    if fields.shape[0] == 0:
        return None
    with torch.no_grad():
        latent = model.encode(fields)
        return float(elbo_loss(fields, model.decode(latent.mu), latent, kl_weight))


def train(model, dataset, config=None, frozen=()):
    """Adam on the mean negative ELBO; frozen parameters are left out of the optimizer."""
    config = config or TrainConfig()
    if dataset.fields.shape[1] != model.n_vertices:
        raise GeometryError(
            f'dataset fields have {dataset.fields.shape[1]} values, model expects {model.n_vertices}')
    frozen_ids = {id(p) for p in frozen}
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen_ids)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.eps)
    generator = torch.Generator().manual_seed(config.rng_seed)
    train_x = torch.as_tensor(dataset.split('train')[0], dtype=DTYPE)
    val_x = torch.as_tensor(dataset.split('val')[0], dtype=DTYPE)
    if train_x.shape[0] == 0:
        raise TrainingError('training split is empty')

    history = [{'epoch': 0,
                'train_loss': _mean_loss(model, train_x, config.kl_weight),
                'val_loss': _mean_loss(model, val_x, config.kl_weight)}]
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(train_x.shape[0], generator=generator)
        total = 0.0
        for batch, start in enumerate(range(0, train_x.shape[0], config.batch_size)):
            x = train_x[order[start:start + config.batch_size]]
            latent = model.encode(x)
            eps = torch.randn(latent.mu.shape, generator=generator, dtype=DTYPE)
            loss = elbo_loss(x, model.decode(reparameterize(latent, eps)), latent, config.kl_weight)
            if not torch.isfinite(loss):
                raise TrainingError('non-finite loss', epoch, batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * x.shape[0]
        record = {'epoch': epoch,
                  'train_loss': total / train_x.shape[0],
                  'val_loss': _mean_loss(model, val_x, config.kl_weight)}
        history.append(record)
        val = record['val_loss']
        logger.info('epoch %d train %.5f val %s', epoch, record['train_loss'],
                    'n/a' if val is None else f'{val:.5f}')
    for p in model.parameters():
        p.requires_grad_(True)
    return TrainResult(model, history)


def transplant(source, hierarchy):
    """New model on another geometry carrying every shape-compatible source parameter."""
    if hierarchy.depth != len(source.ops.sizes) - 1:
        raise GeometryError(
            f'source model has depth {len(source.ops.sizes) - 1}, new hierarchy has {hierarchy.depth}')
    target = GVae(hierarchy, source.architecture)
    own = target.state_dict()
    carried = {name: value for name, value in source.state_dict().items()
               if name in own and own[name].shape == value.shape}
    own.update(carried)
    target.load_state_dict(own)
    return target


def fine_tune(model, new_hierarchy, new_dataset, config=None):
    """Retrain everything except the encoder convolutions on a new geometry."""
    adapted = transplant(model, new_hierarchy)
    return train(adapted, new_dataset, config, frozen=adapted.encoder_parameters())
