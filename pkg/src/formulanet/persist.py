"""Single-file model container (``.fnm``).

Layout (all text is UTF-8, lines end in ``\\n``)::

    FNM1
    HEADER <n>            n = byte length of the JSON header that follows
    <json header>
    PAYLOAD <i> <n>       one per network: 0 = full-data fit, 1..B = replicates
    <base64 of little-endian float64 parameters, layer order W0 b0 W1 b1 ...>
    DATA <n>              embedded training table as CSV (n may be 0)
    <csv text>
    CHECKSUM <16 hex digits>
    END

The checksum is the 64-bit BLAKE2b digest of every byte that precedes the
``CHECKSUM`` line. Parameters round-trip bit-exactly; floats in the JSON
header are written with ``repr`` and therefore round-trip too.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ChecksumMismatch,
    FormulaNetError,
    InvariantViolation,
    SerializationError,
    UnsupportedVersion,
)
from .network import Network, NetworkConfig
from .objective import LossSpec
from .tabular import (
    CategoricalColumn,
    DataTable,
    Encoder,
    FeatureEncoding,
    NumericColumn,
    parse_formula,
    read_csv_text,
)
from .training import EpochRecord, FittedModel, TrainConfig, TrainingHistory, TrainRun

MAGIC = b"FNM1"
FORMAT_VERSION = 1
EXTENSION = ".fnm"


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _params_bytes(net: Network) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())


def _history_dict(h: TrainingHistory) -> dict:
    return {"baseline": h.baseline,
            "records": [[r.epoch, r.train_loss, r.val_loss, r.lr] for r in h.records]}


def _history_from(d) -> TrainingHistory:
    return TrainingHistory(float(d["baseline"]),
                           [EpochRecord(int(e), float(t), None if v is None else float(v),
                                        float(lr)) for e, t, v, lr in d["records"]])


def _encoder_dict(enc: Encoder) -> dict:
    return {
        "response": enc.response, "response_kind": enc.response_kind,
        "response_levels": list(enc.response_levels), "standardize": enc.standardize,
        "features": [{"name": f.name, "kind": f.kind, "center": f.center, "scale": f.scale,
                      "levels": list(f.levels)} for f in enc.features],
    }


def _encoder_from(d) -> Encoder:
    feats = tuple(FeatureEncoding(f["name"], f["kind"], float(f["center"]), float(f["scale"]),
                                  tuple(f["levels"])) for f in d["features"])
    return Encoder(feats, d["response"], d["response_kind"], tuple(d["response_levels"]),
                   bool(d["standardize"]))


def save_model(model: FittedModel, path, embed_data: bool = True) -> None:
    """Write ``model`` to ``path`` (see module docstring for the layout)."""
    if model.loss.kind == "custom":
        raise SerializationError("models with a custom loss callback cannot be saved")
    net = model.network
    cfg = net.config
    networks = [net] + ([] if model.ensemble is None else model.ensemble.networks)
    table = model.table if embed_data else None

    header = {
        "format": "formulanet-model",
        "version": FORMAT_VERSION,
        "creator": f"formulanet {__version__}",
        "formula": str(model.formula),
        "loss": model.loss.kind,
        "config": model.config.to_dict(),
        "encoder": _encoder_dict(model.encoder),
        "network": {
            "input_dim": cfg.input_dim, "output_dim": cfg.output_dim,
            "hidden": list(cfg.hidden), "activation": cfg.activation, "bias": cfg.bias,
            "dropout": cfg.dropout,
            "shapes": [list(p.shape) for p in net.parameters()],
        },
        "history": _history_dict(model.history),
        "val_idx": [int(i) for i in model.val_idx],
        "stop_reason": model.stop_reason,
        "payloads": len(networks),
        "ensemble": None,
        "data": None,
    }
    if model.ensemble is not None:
        ens = model.ensemble
        header["ensemble"] = {
            "requested": ens.requested,
            "failures": list(ens.failures),
            "replicates": [{
                "index": r.index, "seed": str(r.seed),
                "resample": [int(i) for i in r.resample],
                "val_idx": [int(i) for i in r.run.val_idx],
                "history": _history_dict(r.run.history),
                "stop_reason": r.run.stop_reason,
            } for r in ens.replicates],
        }
    if table is not None:
        header["data"] = {"columns": [
            {"name": n, "kind": c.kind,
             "levels": list(c.levels) if c.kind == "categorical" else None}
            for n, c in zip(table.column_names, table.columns)]}

    try:
        head = json.dumps(header, allow_nan=False, ensure_ascii=False).encode("utf-8")
    except ValueError as e:
        raise SerializationError(f"model contains non-finite metadata: {e}") from None
    chunks = [MAGIC + b"\n", b"HEADER %d\n" % len(head), head, b"\n"]
    for i, n in enumerate(networks):
        enc = base64.b64encode(_params_bytes(n))
        chunks += [b"PAYLOAD %d %d\n" % (i, len(enc)), enc, b"\n"]
    csv_bytes = table.to_csv().encode("utf-8") if table is not None else b""
    chunks += [b"DATA %d\n" % len(csv_bytes), csv_bytes, b"\n"]
    body = b"".join(chunks)
    blob = body + b"CHECKSUM " + _checksum(body).encode() + b"\nEND\n"
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def line(self) -> bytes:
        end = self.blob.find(b"\n", self.pos)
        if end < 0:
            raise SerializationError("model file is truncated")
        out = self.blob[self.pos:end]
        self.pos = end + 1
        return out

    def tagged(self, tag: bytes, n_fields: int):
        parts = self.line().split(b" ")
        if parts[0] != tag or len(parts) != n_fields + 1:
            raise SerializationError(f"expected {tag.decode()} section")
        try:
            return [int(p) for p in parts[1:]]
        except ValueError:
            raise SerializationError(f"malformed {tag.decode()} line") from None

    def block(self, n: int) -> bytes:
        if n < 0 or self.pos + n + 1 > len(self.blob):
            raise SerializationError("model file is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        if self.blob[self.pos:self.pos + 1] != b"\n":
            raise SerializationError("section length mismatch")
        self.pos += 1
        return out


def _network_from(spec, payload: bytes) -> Network:
    cfg = NetworkConfig(spec["input_dim"], spec["output_dim"], tuple(spec["hidden"]),
                        spec["activation"], spec["bias"], spec["dropout"])
    shapes = [tuple(s) for s in spec["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(payload) != 8 * sum(sizes):
        raise InvariantViolation(
            f"payload holds {len(payload)} bytes, shapes need {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, k = [], 0
    for s, size in zip(shapes, sizes):
        arrays.append(flat[k:k + size].reshape(s).copy())
        k += size
    weights, biases, it = [], [], iter(arrays)
    n_hidden = len(cfg.hidden)
    for i in range(n_hidden + 1):
        weights.append(next(it))
        biases.append(next(it) if (cfg.bias or i == n_hidden) else None)
    net = Network(cfg, weights, biases)
    if not net.is_finite():
        raise InvariantViolation("network parameters are not finite")
    return net


def _table_from(spec, text: str) -> DataTable:
    cols = spec["columns"]
    table = read_csv_text(
        text,
        categorical=[c["name"] for c in cols if c["kind"] == "categorical"],
        numeric=[c["name"] for c in cols if c["kind"] == "numeric"],
    )
    if list(table.column_names) != [c["name"] for c in cols]:
        raise InvariantViolation("embedded data columns do not match the header")
    out = []
    for c, col in zip(cols, table.columns):
        if c["kind"] == "categorical":
            levels = tuple(c["levels"])
            lookup = {lv: i for i, lv in enumerate(levels)}
            if any(lv not in lookup for lv in col.levels):
                raise InvariantViolation(f"column {c['name']!r} holds an undeclared level")
            mapping = np.array([lookup[lv] for lv in col.levels] + [-1], dtype=np.int64)
            out.append(CategoricalColumn(mapping[col.codes], levels))
        else:
            out.append(NumericColumn(col.values))
    return DataTable(table.column_names, tuple(out))


def load_model(path) -> FittedModel:
    """Read a model written by :func:`save_model`, revalidating all invariants."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise SerializationError(f"cannot read {path}: {e.strerror}") from None
    try:
        return _load(blob)
    except FormulaNetError as e:
        if isinstance(e, (SerializationError, ChecksumMismatch, UnsupportedVersion,
                          InvariantViolation)):
            raise
        raise InvariantViolation(str(e)) from None
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise SerializationError(f"malformed model file: {e}") from None


def _load(blob: bytes) -> FittedModel:
    r = _Reader(blob)
    if r.line() != MAGIC:
        raise SerializationError("not a formulanet model file (bad magic)")
    (n_head,) = r.tagged(b"HEADER", 1)
    try:
        header = json.loads(r.block(n_head).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise SerializationError("model header is not valid JSON") from None
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"model format version {version!r} is not supported "
                                 f"(expected {FORMAT_VERSION})")
    payloads = []
    for i in range(header["payloads"]):
        idx, n = r.tagged(b"PAYLOAD", 2)
        if idx != i:
            raise SerializationError("payloads out of order")
        payloads.append(r.block(n))
    (n_data,) = r.tagged(b"DATA", 1)
    data_bytes = r.block(n_data)
    body_end = r.pos
    check = r.line().split(b" ")
    if len(check) != 2 or check[0] != b"CHECKSUM":
        raise SerializationError("model file is truncated (no checksum)")
    if check[1].decode("ascii", "replace") != _checksum(blob[:body_end]):
        raise ChecksumMismatch("model file checksum does not match its contents")
    if r.line() != b"END":
        raise SerializationError("model file is truncated (no END marker)")

    try:
        params = [base64.b64decode(p, validate=True) for p in payloads]
    except binascii.Error:
        raise SerializationError("payload is not valid base64") from None

    spec = header["network"]
    network = _network_from(spec, params[0])
    encoder = _encoder_from(header["encoder"])
    if encoder.width != network.config.input_dim:
        raise InvariantViolation("encoder width does not match the network input")
    config = TrainConfig.from_dict(header["config"])
    loss = LossSpec(header["loss"])
    table = None
    if header["data"] is not None:
        table = _table_from(header["data"], data_bytes.decode("utf-8"))
    val_idx = np.array(header["val_idx"], dtype=np.int64)
    if table is not None and val_idx.size and (val_idx.max() >= table.n_rows or val_idx.min() < 0):
        raise InvariantViolation("validation indices out of range")

    model = FittedModel(
        network=network, encoder=encoder, formula=parse_formula(header["formula"]),
        loss=loss, config=config, history=_history_from(header["history"]),
        val_idx=val_idx, table=table, stop_reason=header["stop_reason"],
    )
    ens = header["ensemble"]
    if ens is not None:
        from .uncertainty import BootstrapEnsemble, Replicate

        reps = ens["replicates"]
        if len(reps) + 1 != len(params):
            raise InvariantViolation("ensemble size does not match the payload count")
        replicates = []
        for rep, payload in zip(reps, params[1:]):
            net = _network_from(spec, payload)
            run = TrainRun(net, _history_from(rep["history"]),
                           np.array(rep["val_idx"], dtype=np.int64), rep["stop_reason"])
            replicates.append(Replicate(int(rep["index"]), int(rep["seed"]),
                                        np.array(rep["resample"], dtype=np.int64), run))
        model.ensemble = BootstrapEnsemble(replicates, list(ens["failures"]),
                                           int(ens["requested"]))
    elif len(params) != 1:
        raise InvariantViolation("extra payloads without an ensemble")
    return model
