"""Pairwise-masked secure aggregation with sparsified masks.

Each pair of participants shares a Diffie-Hellman seed, expands it into a
uniform mask on ``[p, p+q)``, and zeroes every entry at or above the filter
threshold ``p + (k_ratio / x) * q``. The lower-id member adds the filtered
mask, the higher-id member subtracts it. A client transmits a position when
it is among its Top-k gradient entries or when any of its pair masks is
nonzero there, so both members of a pair always send the positions their
shared mask occupies and the masks cancel in the server's sum.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ConformabilityError
from .sparsify import SparseUpdate, from_mask, top_count, topk_indices, topk_threshold
from .tensor import LayeredTensor


@dataclass(frozen=True)
class DHGroup:
    prime: int
    generator: int


# 2**255 + 0x2ff7f is a safe prime (its (p-1)/2 is prime) and is 7 mod 8,
# so 2 generates the prime-order subgroup of quadratic residues.
DEFAULT_GROUP = DHGroup(prime=2**255 + 0x2FF7F, generator=2)


@dataclass(frozen=True)
class KeyPair:
    private: int
    public: int


def make_keypair(private: int, group: DHGroup = DEFAULT_GROUP) -> KeyPair:
    if not 1 <= private < group.prime - 1:
        raise ConfigError("private exponent out of range for group")
    return KeyPair(private, pow(group.generator, private, group.prime))


def shared_secret(private: int, peer_public: int, group: DHGroup = DEFAULT_GROUP) -> int:
    if not 1 < peer_public < group.prime - 1:
        raise ConfigError("peer public key out of range")
    return pow(peer_public, private, group.prime)


def secret_to_seed(secret: int, group: DHGroup = DEFAULT_GROUP) -> int:
    """Hash a shared secret down to a 64-bit PRG seed."""
    width = (group.prime.bit_length() + 7) // 8
    digest = hashlib.sha256(secret.to_bytes(width, "big")).digest()
    return int.from_bytes(digest[:8], "big")


def _private_for(participant: int, sim_seed: int, group: DHGroup) -> int:
    digest = hashlib.sha256(f"sparsefl-dh:{sim_seed}:{participant}".encode()).digest()
    return int.from_bytes(digest, "big") % (group.prime - 2) + 1


class PairSeeds(Mapping):
    """Symmetric lookup ``seeds[u, v] == seeds[v, u]`` over unordered pairs."""

    def __init__(self, seeds: dict[tuple[int, int], int]):
        self._seeds = seeds

    def __getitem__(self, pair: tuple[int, int]) -> int:
        u, v = pair
        return self._seeds[(u, v) if u < v else (v, u)]

    def __iter__(self):
        return iter(self._seeds)

    def __len__(self) -> int:
        return len(self._seeds)


def dh_exchange(participants: Iterable[int], group: DHGroup = DEFAULT_GROUP, seed: int = 0) -> PairSeeds:
    """Run an in-process DH key agreement between every pair of participants."""
    ids = sorted(set(int(p) for p in participants))
    if len(ids) < 2:
        raise ConfigError("key exchange needs at least 2 participants")
    keys = {pid: make_keypair(_private_for(pid, seed, group), group) for pid in ids}
    seeds = {}
    for u, v in itertools.combinations(ids, 2):
        s_u = shared_secret(keys[u].private, keys[v].public, group)
        s_v = shared_secret(keys[v].private, keys[u].public, group)
        if s_u != s_v:
            raise RuntimeError(f"DH disagreement between {u} and {v}")
        seeds[(u, v)] = secret_to_seed(s_u, group)
    return PairSeeds(seeds)


@dataclass(frozen=True)
class MaskParams:
    p: float = 0.0
    q: float = 1.0
    k_ratio: float = 1.0
    x: int = 2

    def __post_init__(self):
        if self.q <= 0:
            raise ConfigError(f"mask width q must be positive, got {self.q}")
        if self.x < 1:
            raise ConfigError(f"participant count x must be >= 1, got {self.x}")
        if not 0 <= self.k_ratio <= self.x:
            raise ConfigError(f"k_ratio must lie in [0, x={self.x}], got {self.k_ratio}")

    @property
    def sigma_mask(self) -> float:
        """Filter threshold: mask entries strictly below it survive."""
        return self.p + (self.k_ratio / self.x) * self.q


def gen_mask(seed: int, shapes: Sequence[Sequence[int]], params: MaskParams) -> LayeredTensor:
    """Expand ``seed`` into a uniform mask on ``[p, p+q)`` with the given layer shapes."""
    total = sum(int(np.prod(s)) for s in shapes)
    u = np.random.default_rng(seed).random(total)
    vals = params.p + params.q * u
    # p + q*u can round up to p + q when u is within an ulp of 1.
    np.minimum(vals, np.nextafter(params.p + params.q, -np.inf), out=vals)
    return LayeredTensor.from_flat(vals, shapes)


def filter_mask(mask_r: LayeredTensor, sigma_mask: float) -> LayeredTensor:
    return LayeredTensor(np.where(m < sigma_mask, m, 0.0) for m in mask_r.layers)


def pair_sign(client: int, peer: int) -> float:
    return 1.0 if client < peer else -1.0


def round_pair_masks(participants: Sequence[int], seeds: PairSeeds,
                     shapes: Sequence[Sequence[int]], params: MaskParams) -> dict[tuple[int, int], LayeredTensor]:
    """Filtered (unsigned) shared mask for each pair ``u < v`` of this round's participants."""
    ids = sorted(participants)
    return {
        (u, v): filter_mask(gen_mask(seeds[u, v], shapes, params), params.sigma_mask)
        for u, v in itertools.combinations(ids, 2)
    }


def signed_masks_for(client: int, participants: Sequence[int],
                     pair_masks: Mapping[tuple[int, int], LayeredTensor]) -> list[LayeredTensor]:
    out = []
    for peer in sorted(participants):
        if peer == client:
            continue
        key = (client, peer) if client < peer else (peer, client)
        out.append(pair_masks[key] * pair_sign(client, peer))
    return out


@dataclass(frozen=True)
class DynamicRateState:
    R: float
    R_min: float
    alpha: float
    T: int
    t: int = 0
    prev_loss: float | None = None

    def __post_init__(self):
        if not 0 < self.R_min <= 1:
            raise ConfigError(f"R_min must lie in (0, 1], got {self.R_min}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")


def update_rate(state: DynamicRateState, current_loss: float) -> DynamicRateState:
    """Advance the client's sparsity rate by one round.

    ``beta`` is the relative loss change versus the previous round (zero on
    the first round or when the previous loss is zero).
    """
    if state.t >= state.T:
        raise ConfigError(f"round index t={state.t} must be < T={state.T}")
    if state.prev_loss is None or state.prev_loss == 0:
        beta = 0.0
    else:
        beta = (current_loss - state.prev_loss) / state.prev_loss
    factor = state.alpha + beta - state.t / state.T
    R = min(1.0, max(state.R_min, factor * state.R))
    return replace(state, R=R, prev_loss=float(current_loss), t=state.t + 1)


@dataclass
class ClientMaskState:
    mask_top: list[np.ndarray]
    mask_e: LayeredTensor
    mask_t: list[np.ndarray]
    thresholds: list[float]

    @property
    def transmit_count(self) -> int:
        return int(sum(m.sum() for m in self.mask_t))


def build_masks(grad: LayeredTensor, R: float, pair_masks: Sequence[LayeredTensor]) -> ClientMaskState:
    """Top-k positions at rate ``R`` per layer, summed signed mask, and transmit mask.

    A position is transmitted unless it is outside the Top-k and every pair
    mask is zero there.
    """
    if not 0 < R <= 1:
        raise ConfigError(f"rate R must lie in (0, 1], got {R}")
    for pm in pair_masks:
        if not pm.conformable(grad):
            raise ConformabilityError(f"pair mask shapes {pm.shapes} do not match gradient {grad.shapes}")
    mask_top, mask_t, thresholds, mask_e = [], [], [], []
    for i, layer in enumerate(grad.layers):
        k = top_count(layer.size, R)
        thresholds.append(topk_threshold(layer, k))
        top = np.zeros(layer.shape, dtype=bool)
        top.ravel()[topk_indices(layer, k)] = True
        summed = np.zeros(layer.shape)
        any_mask = np.zeros(layer.shape, dtype=bool)
        for pm in pair_masks:
            summed = summed + pm[i]
            any_mask |= pm[i] != 0
        mask_top.append(top)
        mask_e.append(summed)
        mask_t.append(top | any_mask)
    return ClientMaskState(mask_top, LayeredTensor(mask_e), mask_t, thresholds)


def encrypt_encode(grad: LayeredTensor, state: ClientMaskState) -> SparseUpdate:
    """Masked values ``G + mask_e`` at every transmitted position."""
    return from_mask(grad + state.mask_e, state.mask_t)


def residual(grad: LayeredTensor, state: ClientMaskState) -> LayeredTensor:
    grad.check_conformable(state.mask_e)
    return LayeredTensor(np.where(t, 0.0, g) for g, t in zip(grad.layers, state.mask_t))


def plain_encode(grad: LayeredTensor, state: ClientMaskState) -> SparseUpdate:
    """Unmasked twin of :func:`encrypt_encode`: same positions, raw gradient values."""
    return from_mask(grad, state.mask_t)


def server_aggregate(updates: Sequence[SparseUpdate], num_clients: int) -> LayeredTensor:
    """Dense sum of the decoded updates, in order, divided by ``num_clients``."""
    if not updates:
        raise ConfigError("nothing to aggregate")
    shapes = updates[0].layer_shapes
    total = LayeredTensor.zeros(shapes)
    for u in updates:
        if u.layer_shapes != shapes:
            raise ConformabilityError(f"update shapes {u.layer_shapes} differ from {shapes}")
        total = total + u.to_dense()
    return total / num_clients


@dataclass
class ExposureReport:
    """Positions where two clients' transmitted values are exact nonzero negatives."""

    positions: list[np.ndarray]

    @property
    def count(self) -> int:
        return int(sum(p.size for p in self.positions))


def audit_exposure(updates: Sequence[SparseUpdate]) -> ExposureReport:
    if not updates:
        return ExposureReport([])
    shapes = updates[0].layer_shapes
    positions = []
    for layer, shape in enumerate(shapes):
        size = int(np.prod(shape))
        present = np.zeros((len(updates), size), dtype=bool)
        vals = np.zeros((len(updates), size))
        for c, u in enumerate(updates):
            present[c, u.indices[layer]] = True
            vals[c, u.indices[layer]] = u.values[layer]
        flagged = np.zeros(size, dtype=bool)
        for a, b in itertools.combinations(range(len(updates)), 2):
            # a shared zero carries no mask, so it exposes nothing
            flagged |= present[a] & present[b] & (vals[a] == -vals[b]) & (vals[a] != 0)
        positions.append(np.flatnonzero(flagged))
    return ExposureReport(positions)
