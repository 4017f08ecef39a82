"""Shared attention-map buffer and the distillation loss computed over it.

Clients publish a few low-uncertainty attention rollout maps per class at
the end of each round.  During the next round every client pulls the other
clients' maps for a sample's class and penalizes the squared distance
between its own rollout and each foreign map.  The buffer holds rollout
grids, ids, and uncertainty scalars only; raw pixels never enter it.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .evidential import ContractError


class ProtocolError(RuntimeError):
    """Buffer operation attempted outside the allowed round phase."""


@dataclass(frozen=True)
class RolloutMap:
    """One published attention rollout map.

    grid values live in [0, 1] (max-normalized rollout); uncertainty is
    the vacuity of the producing sample under the publishing client's
    end-of-round model.
    """

    grid: np.ndarray
    client_id: int
    class_id: int
    uncertainty: float
    sample_id: int

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ContractError(f"rollout grid must be 2-d, got shape {grid.shape}")
        if not np.isfinite(grid).all():
            raise ContractError("rollout grid contains non-finite values")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise ContractError("rollout grid values must lie in [0, 1]")
        if not (0.0 <= self.uncertainty <= 1.0):
            raise ContractError(f"uncertainty must lie in [0, 1], got {self.uncertainty}")
        if self.client_id < 0 or self.class_id < 0 or self.sample_id < 0:
            raise ContractError("ids must be non-negative")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)


class AttentionBuffer:
    """Round-versioned store of published maps, keyed by (client, class).

    Writable only between rounds: ``begin_publish(r)`` opens the barrier,
    each client calls ``publish`` once, and ``commit(r)`` advances the
    version.  During training the buffer is read-only at version r-1.
    """

    def __init__(self, num_clients: int, num_classes: int, capacity_per_class: int):
        if num_clients < 1 or num_classes < 1 or capacity_per_class < 1:
            raise ContractError("buffer dimensions must be positive")
        self.num_clients = num_clients
        self.num_classes = num_classes
        self.capacity_per_class = capacity_per_class
        self.version = 0
        self.phase = "training"
        self._pending_round = None
        self._entries: dict[tuple[int, int], tuple[RolloutMap, ...]] = {}
        self._grid_shape = None

    @property
    def capacity_total(self) -> int:
        return self.num_clients * self.num_classes * self.capacity_per_class

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def begin_publish(self, round_index: int):
        if self.phase != "training":
            raise ProtocolError("publish phase already open")
        if round_index != self.version + 1:
            raise ProtocolError(
                f"cannot open publish for round {round_index} at buffer version {self.version}"
            )
        self.phase = "publish"
        self._pending_round = round_index

    def publish(self, client_id: int, maps):
        """Replace ``client_id``'s entries for every class present in ``maps``."""
        if self.phase != "publish":
            raise ProtocolError("publish attempted mid-round; call begin_publish first")
        if not 0 <= client_id < self.num_clients:
            raise ContractError(f"client_id {client_id} out of range")
        grouped: dict[int, list[RolloutMap]] = {}
        for m in maps:
            if m.client_id != client_id:
                raise ContractError(
                    f"map from client {m.client_id} published under client {client_id}"
                )
            if not 0 <= m.class_id < self.num_classes:
                raise ContractError(f"class_id {m.class_id} out of range")
            if self._grid_shape is None:
                self._grid_shape = m.grid.shape
            elif m.grid.shape != self._grid_shape:
                raise ContractError(
                    f"grid shape {m.grid.shape} differs from buffer shape {self._grid_shape}"
                )
            grouped.setdefault(m.class_id, []).append(m)
        for class_id, group in grouped.items():
            if len(group) > self.capacity_per_class:
                raise ContractError(
                    f"{len(group)} maps published for class {class_id}, "
                    f"capacity is {self.capacity_per_class}"
                )
            self._entries[(client_id, class_id)] = tuple(group)

    def commit(self, round_index: int):
        if self.phase != "publish":
            raise ProtocolError("commit without an open publish phase")
        if round_index != self._pending_round:
            raise ProtocolError(
                f"commit round {round_index} does not match open round {self._pending_round}"
            )
        self.version = round_index
        self.phase = "training"
        self._pending_round = None

    def entries_for_class(self, class_id: int, exclude_client=None) -> tuple:
        """All stored maps for a class, in ascending client order."""
        out = []
        for (c, k) in sorted(self._entries):
            if k != class_id or c == exclude_client:
                continue
            out.extend(self._entries[(c, k)])
        return tuple(out)

    def entry_counts(self) -> dict:
        return {key: len(v) for key, v in sorted(self._entries.items())}

    def iter_entries(self):
        for key in sorted(self._entries):
            for slot, m in enumerate(self._entries[key]):
                yield key[0], key[1], slot, m


def select_for_sharing(scored, capacity: int) -> dict:
    """Pick the lowest-uncertainty sample ids per class.

    ``scored`` is an iterable of (class_id, uncertainty, sample_id).
    Returns {class_id: (sample_id, ...)} with min(capacity, available)
    ids per class, ordered by (uncertainty, sample_id); the tie-break on
    sample_id keeps selection deterministic.
    """
    if capacity < 1:
        raise ContractError("capacity must be positive")
    by_class: dict[int, list] = {}
    for class_id, uncertainty, sample_id in scored:
        by_class.setdefault(class_id, []).append((float(uncertainty), int(sample_id)))
    out = {}
    for class_id in sorted(by_class):
        ranked = sorted(by_class[class_id])
        out[class_id] = tuple(sid for _, sid in ranked[:capacity])
    return out


def random_selection_baseline(scored, capacity: int, rng) -> dict:
    """Ablation selector: uniform choice without replacement per class."""
    if capacity < 1:
        raise ContractError("capacity must be positive")
    by_class: dict[int, list] = {}
    for class_id, _, sample_id in scored:
        by_class.setdefault(class_id, []).append(int(sample_id))
    out = {}
    for class_id in sorted(by_class):
        ids = sorted(by_class[class_id])
        take = min(capacity, len(ids))
        picked = rng.choice(len(ids), size=take, replace=False)
        out[class_id] = tuple(ids[i] for i in picked)
    return out


def kd_loss(rollout, buffer: AttentionBuffer, client_id: int, class_id: int):
    """Distillation term for a single sample's rollout map.

    (1/M) * sum over foreign clients i and slots m of
    ||rollout - a_{i,class,m}||^2, with M the per-class capacity.  Clients
    without entries for the class contribute nothing; with no foreign maps
    at all the term is 0.
    """
    foreign = buffer.entries_for_class(class_id, exclude_client=client_id)
    if not foreign:
        return ad.Tensor(0.0)
    total = None
    for m in foreign:
        if m.grid.shape != rollout.shape:
            raise ContractError(
                f"rollout shape {rollout.shape} does not match stored grid {m.grid.shape}"
            )
        d = ad.sub(rollout, ad.Tensor(m.grid))
        term = ad.sum_(ad.mul(d, d))
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(buffer.capacity_per_class))


@dataclass(frozen=True)
class KDConstants:
    """Per-class buffer summaries that let a whole batch share one graph.

    For each class k over the foreign maps b_m:  count[k] = #maps,
    map_sum[k] = sum_m b_m, sq_sum[k] = sum_m ||b_m||^2.  Then for a
    sample map a of class k,
    sum_m ||a - b_m||^2 = count[k]*sum(a^2) - 2*sum(a*map_sum[k]) + sq_sum[k].
    """

    count: np.ndarray
    map_sum: np.ndarray
    sq_sum: np.ndarray
    capacity: int
    has_foreign: bool = False


def kd_constants(buffer: AttentionBuffer, client_id: int, grid_shape) -> KDConstants:
    K = buffer.num_classes
    count = np.zeros(K)
    map_sum = np.zeros((K,) + tuple(grid_shape))
    sq_sum = np.zeros(K)
    any_foreign = False
    for k in range(K):
        for m in buffer.entries_for_class(k, exclude_client=client_id):
            if m.grid.shape != tuple(grid_shape):
                raise ContractError(
                    f"stored grid {m.grid.shape} does not match expected {tuple(grid_shape)}"
                )
            count[k] += 1.0
            map_sum[k] += m.grid
            sq_sum[k] += float((m.grid * m.grid).sum())
            any_foreign = True
    return KDConstants(count, map_sum, sq_sum, buffer.capacity_per_class, any_foreign)


def kd_loss_batch(rollouts, labels, consts: KDConstants):
    """Mean distillation term over a batch of rollout maps [B, H, W].

    Expands the squared distances against per-class constants so the cost
    stays independent of how many maps the buffer holds.
    """
    labels = np.asarray(labels)
    if not consts.has_foreign:
        return ad.Tensor(0.0)
    if rollouts.shape[1:] != consts.map_sum.shape[1:]:
        raise ContractError(
            f"rollout shape {rollouts.shape[1:]} does not match buffer grids "
            f"{consts.map_sum.shape[1:]}"
        )
    axes = (1, 2)
    own_sq = ad.sum_(ad.mul(rollouts, rollouts), axis=axes)
    cross = ad.sum_(ad.mul(rollouts, ad.Tensor(consts.map_sum[labels])), axis=axes)
    counts = ad.Tensor(consts.count[labels])
    offs = ad.Tensor(consts.sq_sum[labels])
    per_sample = ad.add(ad.sub(ad.mul(counts, own_sq), ad.mul(cross, 2.0)), offs)
    return ad.div(ad.mean(per_sample), float(consts.capacity))


def combined_loss(loss_eps, loss_kd, lam: float):
    """Training objective: evidential term plus lam times the KD term."""
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return ad.add(loss_eps, ad.mul(loss_kd, float(lam)))


# ---------------------------------------------------------------------------
# buffer dumps (16-bit grayscale PGM per entry + text manifest)
# ---------------------------------------------------------------------------

def write_pgm(path, grid: np.ndarray):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ContractError(f"PGM grid must be 2-d, got shape {grid.shape}")
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ContractError("PGM grid values must lie in [0, 1]")
    h, w = grid.shape
    # Netpbm 16-bit stores the most significant byte first
    payload = np.round(grid * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(payload.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ContractError(f"{path}: not a binary PGM file")
        w, h = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        if maxval != 65535:
            raise ContractError(f"{path}: expected 16-bit PGM, maxval {maxval}")
        raw = np.frombuffer(f.read(w * h * 2), dtype=">u2")
    return raw.reshape(h, w).astype(np.float64) / 65535.0


def dump_buffer(buffer: AttentionBuffer, out_dir, round_index: int):
    """Write every entry as round<r>_c<c>_k<k>_m<m>.pgm plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for c, k, slot, m in buffer.iter_entries():
        name = f"round{round_index}_c{c}_k{k}_m{slot}.pgm"
        write_pgm(out_dir / name, m.grid)
        lines.append(f"{c} {k} {slot} {m.uncertainty:.17g}\n")
    with open(out_dir / f"round{round_index}_manifest.txt", "w") as f:
        f.writelines(lines)
