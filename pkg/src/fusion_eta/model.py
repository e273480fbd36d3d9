"""Trip-time regression network with a pluggable sequence encoder.

Per-link input vectors concatenate a link-id embedding, scaled per-link
reals, and broadcast departure context (driver / time-slice / weekday
embeddings plus total trip distance).  A shared ReLU MLP maps each link
vector to the encoder input; the encoder is one of the recurrent cells (or
masked mean-pooling for the feed-forward baseline); an MLP regressor reads
the final valid hidden state and a softplus head scaled by
``output_scale`` keeps predictions positive.

Batched forwards lay all time steps out column-wise (column ``t*B + b`` is
trip ``b`` at step ``t``) so the per-link MLP runs as one matrix product,
then the encoder walks the T column blocks with a mask that freezes
finished trips.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import Tensor
from .config import EtaModelConfig, section_from_dict
from .data import Batch, TripRecord, make_batch, make_batches
from .errors import DomainError, ValidationError
from .linalg import OpCounter, make_rng

# scales that bring raw features to O(1); order matches data.LINK_FEATURE_NAMES
LINK_FEATURE_SCALES = np.array([1.0 / 1000.0, 1.0 / 30.0, 1.0 / 60.0, 1.0 / 60.0])
TOTAL_DIST_SCALE = 1.0 / 10000.0
NUM_TIME_SLICES = 288
NUM_WEEKDAYS = 7
CHECKPOINT_VERSION = 1


class EmbeddingTable:
    """A (dim x cardinality) parameter matrix addressed by integer id."""

    def __init__(self, table: Tensor):
        self.table = table

    @property
    def dim(self) -> int:
        return self.table.data.shape[0]

    @property
    def cardinality(self) -> int:
        return self.table.data.shape[1]

    def gather(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cardinality):
            bad = int(ids.min() if ids.min() < 0 else ids.max())
            raise IndexError(f"embedding id {bad} outside [0, {self.cardinality})")
        return ad.gather_cols(self.table, ids)


def embed_lookup(table: EmbeddingTable, idx: int) -> Tensor:
    """Column ``idx`` of the table as a (dim x 1) tensor."""
    if not 0 <= idx < table.cardinality:
        raise IndexError(f"embedding id {idx} outside [0, {table.cardinality})")
    return table.gather(np.array([idx], dtype=np.int64))


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    limit = math.sqrt(6.0 / (rows + cols))
    return ad.parameter(rng.uniform(-limit, limit, size=(rows, cols)))


class EtaModel:
    """The regression network; construction order of parameters is fixed so
    one seed always yields the same model."""

    def __init__(self, cfg: EtaModelConfig, rng: np.random.Generator):
        if rng is None:
            raise ValidationError("EtaModel requires an explicit rng")
        self.cfg = cfg
        self._params: dict[str, Tensor] = {}

        self.link_emb = EmbeddingTable(self._track("link_emb", _glorot(rng, cfg.link_embed_dim, cfg.num_links)))
        self.driver_emb = EmbeddingTable(self._track("driver_emb", _glorot(rng, cfg.driver_embed_dim, cfg.num_drivers)))
        self.slice_emb = EmbeddingTable(self._track("slice_emb", _glorot(rng, cfg.timeslice_embed_dim, NUM_TIME_SLICES)))
        self.weekday_emb = EmbeddingTable(self._track("weekday_emb", _glorot(rng, cfg.weekday_embed_dim, NUM_WEEKDAYS)))

        self.input_dim = (cfg.link_embed_dim + len(LINK_FEATURE_SCALES) + cfg.driver_embed_dim
                          + cfg.timeslice_embed_dim + cfg.weekday_embed_dim + 1)
        self.mlp: list[tuple[Tensor, Tensor]] = []
        prev = self.input_dim
        for i, width in enumerate(cfg.mlp_hidden_sizes):
            W = self._track(f"mlp{i}_W", _glorot(rng, width, prev))
            # small positive bias keeps ReLU units alive at initialization
            b = self._track(f"mlp{i}_b", ad.parameter(np.full((width, 1), 0.01)))
            self.mlp.append((W, b))
            prev = width
        self.encoder_input_dim = prev

        if cfg.rnn_variant == "none-ffn":
            self.encoder = None
            encoder_out = prev
        else:
            self.encoder = cells.init_params(cfg.rnn_variant, prev, cfg.rnn_hidden,
                                             cfg.r if cfg.rnn_variant == "fusion" else 0, rng)
            if cfg.rnn_variant == "fusion" and cfg.r >= 1:
                # a zero transport bias plus the zero initial hidden state
                # would freeze the fused state at zero forever (tanh(0)
                # annihilates both update factors); a small random bias lets
                # the first step seed a usable hidden state
                n = cfg.rnn_hidden
                limit = math.sqrt(6.0 / (n + 1))
                self.encoder.b.data[...] = rng.uniform(-limit, limit, size=(n, 1))
            for name, t in self.encoder.named().items():
                self._track(f"enc_{name}", t)
            encoder_out = cfg.rnn_hidden

        self.reg1_W = self._track("reg1_W", _glorot(rng, cfg.regressor_hidden, encoder_out))
        self.reg1_b = self._track("reg1_b", ad.parameter(np.full((cfg.regressor_hidden, 1), 0.01)))
        self.reg2_W = self._track("reg2_W", _glorot(rng, 1, cfg.regressor_hidden))
        self.reg2_b = self._track("reg2_b", ad.parameter(np.zeros((1, 1))))

    def _track(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    # -- forward ----------------------------------------------------------

    def forward_batch(self, batch: Batch, counter: OpCounter | None = None) -> Tensor:
        """Predicted seconds for every trip in the batch, as a (1 x B) tensor."""
        B, T = batch.link_ids.shape
        flat_ids = batch.link_ids.T.reshape(-1)  # t-major columns
        feats = np.transpose(batch.link_feats, (1, 0, 2)).reshape(T * B, -1).T
        feats = feats * LINK_FEATURE_SCALES[:, None]

        x = ad.concat_rows([
            self.link_emb.gather(flat_ids),
            ad.constant(feats),
            self.driver_emb.gather(np.tile(batch.driver_ids, T)),
            self.slice_emb.gather(np.tile(batch.slice_ids, T)),
            self.weekday_emb.gather(np.tile(batch.weekday_ids, T)),
            ad.constant(np.tile(batch.total_dist_m * TOTAL_DIST_SCALE, T).reshape(1, -1)),
        ])
        for W, b in self.mlp:
            x = ad.relu(ad.affine(W, x, b, counter))

        if self.encoder is None:
            pooled = None
            masked = ad.scale_cols(x, batch.mask.T.reshape(-1))
            for t in range(T):
                block = ad.slice_cols(masked, t * B, (t + 1) * B)
                pooled = block if pooled is None else ad.add(pooled, block)
            encoded = ad.scale_cols(pooled, 1.0 / batch.lengths)
        else:
            state = cells.initial_state(self.encoder, batch=B)
            for t in range(T):
                x_t = ad.slice_cols(x, t * B, (t + 1) * B)
                new_state = cells.cell_step(self.encoder, x_t, state, counter)
                mask_t = batch.mask[:, t]
                state = tuple(ad.mask_columns(mask_t, new, old)
                              for new, old in zip(new_state, state))
            encoded = state[0]

        hidden = ad.relu(ad.affine(self.reg1_W, encoded, self.reg1_b, counter))
        raw = ad.affine(self.reg2_W, hidden, self.reg2_b, counter)
        return ad.smul(ad.softplus(raw), self.cfg.output_scale)

    def forward_trip(self, trip: TripRecord, tz_offset_s: int = 0) -> float:
        trip.validate(self.cfg.num_links)
        batch = make_batch([trip], tz_offset_s)
        return float(self.forward_batch(batch).data[0, 0])

    def predict(self, records: list[TripRecord], batch_size: int = 256,
                tz_offset_s: int = 0) -> np.ndarray:
        """Forward-only predictions over records, in input order."""
        preds = []
        for batch in make_batches(records, batch_size, rng=None, tz_offset_s=tz_offset_s):
            preds.append(self.forward_batch(batch).data[0].copy())
        return np.concatenate(preds) if preds else np.empty(0)


# ---------------------------------------------------------------------------
# baselines


def route_eta_baseline(trip: TripRecord) -> float:
    """Sum of length/speed-estimate quotients plus intersection delays."""
    if not trip.links:
        raise DomainError(f"trip {trip.trip_id}: no links to sum")
    total = 0.0
    for link in trip.links:
        if link.length_m <= 0 or link.speed_est_mps <= 0:
            raise DomainError(f"trip {trip.trip_id}: nonpositive length or speed on link {link.link_id}")
        if link.delay_s < 0:
            raise DomainError(f"trip {trip.trip_id}: negative delay on link {link.link_id}")
        total += link.length_m / link.speed_est_mps + link.delay_s
    return total


def route_eta_predictions(records: list[TripRecord]) -> np.ndarray:
    return np.array([route_eta_baseline(t) for t in records])


def fit_constant_mean(records: list[TripRecord]) -> float:
    """The scalar that a constant predictor should output: the mean target."""
    if not records:
        raise DomainError("cannot fit a constant predictor on zero trips")
    return float(np.mean([t.y_seconds for t in records]))


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(model: EtaModel, path: str, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "params": {name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
                   for name, t in model.parameters().items()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> tuple[EtaModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    cfg = section_from_dict(EtaModelConfig, payload["config"], "model")
    model = EtaModel(cfg, make_rng(0))
    saved = payload["params"]
    missing = sorted(set(model.parameters()) - set(saved))
    excess = sorted(set(saved) - set(model.parameters()))
    if missing or excess:
        raise ValidationError(f"checkpoint parameters mismatch: missing {missing}, unexpected {excess}")
    for name, t in model.parameters().items():
        shape = tuple(saved[name]["shape"])
        if shape != t.data.shape:
            raise ValidationError(f"checkpoint tensor {name} has shape {shape}, expected {t.data.shape}")
        t.data[...] = np.array(saved[name]["data"], dtype=np.float64).reshape(shape)
    return model, payload.get("extra", {})
