"""On-disk formats: TDQC checkpoints, TDQT raw dumps and the CSV exports.

All binary integers are little-endian u32; tensors are little-endian.
"""

from __future__ import annotations

import csv
import json
import struct
from typing import Iterable, Iterator

import numpy as np

from .calib import CalibrationSet
from .context import ActQuant, QuantContext, WeightQuant
from .denoiser import ActivationTrace, Denoiser, RunningStats
from .numerics import Param, Tensor
from .quant import QuantSpec
from .temporal import GeneratorMLP, IntervalTable

CKPT_MAGIC = b"TDQC"
CKPT_VERSION = 1
RAW_MAGIC = b"TDQT"
RAW_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file")
    return struct.unpack("<I", raw)[0]


def write_blobs(path, blobs: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blobs)))
        for name, arr in blobs.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype.newbyteorder("<").str)
            if code is None:
                raise TypeError(f"cannot store dtype {arr.dtype} ({name})")
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<II", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_blobs(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a TDQC checkpoint")
        version = _u32(fh)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(_u32(fh)):
            name = fh.read(_u32(fh)).decode()
            code, ndim = _u32(fh), _u32(fh)
            shape = tuple(_u32(fh) for _ in range(ndim))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"{path}: truncated blob {name}")
            out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return out


def _json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(path, model: Denoiser, ctx: QuantContext | None = None, meta: dict | None = None) -> None:
    header = {
        "model": {"input_dim": model.input_dim, "hidden": model.hidden, "depth": model.depth, "embed_dim": model.embed_dim, "t_max": model.t_max},
        "meta": meta or {},
    }
    blobs = {f"model/{k}": p.data for k, p in model.named_params().items()}
    if ctx is not None:
        sites = {}
        for site, aq in ctx.act.items():
            sites[site] = {"mode": aq.mode, "bits": aq.spec.bits, "symmetric": aq.spec.symmetric}
            if aq.s is not None:
                blobs[f"act/{site}/s"] = aq.s.data
            if aq.z is not None:
                blobs[f"act/{site}/z"] = aq.z.data
            if aq.gen is not None:
                sites[site]["gen"] = {"d": aq.gen.d, "hidden": aq.gen.hidden}
                for i, (w, b) in enumerate(zip(aq.gen.weights, aq.gen.biases)):
                    blobs[f"gen/{site}/l{i}.w"] = w.data
                    blobs[f"gen/{site}/l{i}.b"] = b.data
            wq = ctx.weight[site]
            if wq is not None:
                sites[site]["weight"] = {"bits": wq.spec.bits, "symmetric": wq.spec.symmetric, "learnable": isinstance(wq.s, Param)}
                blobs[f"wq/{site}/s"] = wq.s.data
                blobs[f"wq/{site}/z"] = wq.z.data
        header["ctx"] = {"sites": sites, "t_max": ctx.t_max}
    write_blobs(path, {"header": _json_blob(header), **blobs})


def load_checkpoint(path) -> tuple[Denoiser, QuantContext | None, dict]:
    blobs = read_blobs(path)
    if "header" not in blobs:
        raise FormatError(f"{path}: missing header blob")
    header = json.loads(blobs["header"].tobytes().decode())
    cfg = header["model"]
    model = Denoiser(cfg["input_dim"], cfg["hidden"], cfg["depth"], cfg["embed_dim"], t_max=cfg["t_max"])
    for k, p in model.named_params().items():
        p.data[...] = blobs[f"model/{k}"]
    ctx = None
    if "ctx" in header:
        act, weight = {}, {}
        for site, sc in header["ctx"]["sites"].items():
            spec = QuantSpec(sc["bits"], sc["symmetric"])
            s = Param(blobs[f"act/{site}/s"]) if f"act/{site}/s" in blobs else None
            z = Param(blobs[f"act/{site}/z"]) if f"act/{site}/z" in blobs else None
            gen = None
            if "gen" in sc:
                gen = GeneratorMLP(sc["gen"]["d"], sc["gen"]["hidden"], name=f"gen.{site}")
                for i in range(3):
                    gen.weights[i].data[...] = blobs[f"gen/{site}/l{i}.w"]
                    gen.biases[i].data[...] = blobs[f"gen/{site}/l{i}.b"]
            act[site] = ActQuant(sc["mode"], spec, s=s, z=z, gen=gen)
            if "weight" in sc:
                wc = sc["weight"]
                ws = blobs[f"wq/{site}/s"]
                weight[site] = WeightQuant(
                    QuantSpec(wc["bits"], wc["symmetric"], channel_axis=0),
                    Param(ws) if wc["learnable"] else Tensor(ws),
                    Tensor(blobs[f"wq/{site}/z"]),
                )
            else:
                weight[site] = None
        ctx = QuantContext(act, weight, t_max=header["ctx"]["t_max"])
    return model, ctx, header["meta"]


def write_raw(path, records: Iterable[tuple[int, int, np.ndarray]]) -> int:
    """Write ``(site_id, t, array)`` records; returns the record count."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<I", RAW_VERSION))
        for site_id, t, arr in records:
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<III", site_id, t, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
            n += 1
    return n


def iter_raw(path) -> Iterator[tuple[int, int, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != RAW_MAGIC:
            raise FormatError(f"{path}: not a TDQT dump")
        version = _u32(fh)
        if version != RAW_VERSION:
            raise FormatError(f"{path}: unsupported dump version {version}")
        while True:
            head = fh.read(12)
            if not head:
                return
            if len(head) != 12:
                raise FormatError(f"{path}: truncated record")
            site_id, t, ndim = struct.unpack("<III", head)
            shape = tuple(_u32(fh) for _ in range(ndim))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"{path}: truncated record")
            yield site_id, t, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_calibration(path, calset) -> None:
    """One record per sample, site id 0 (the model input)."""
    write_raw(path, ((0, int(t), x) for x, t in zip(calset.x, calset.t)))
    with open(str(path) + ".meta", "w") as fh:
        fh.write(f"seed={calset.seed}\nsource={calset.source}\n")


def load_calibration(path) -> CalibrationSet:
    xs, ts = [], []
    for _, t, x in iter_raw(path):
        xs.append(x)
        ts.append(t)
    meta = {}
    try:
        with open(str(path) + ".meta") as fh:
            meta = dict(line.rstrip("\n").split("=", 1) for line in fh if "=" in line)
    except FileNotFoundError:
        pass
    return CalibrationSet(np.stack(xs), np.array(ts, dtype=np.int64), seed=int(meta.get("seed", 0)), source=meta.get("source", ""))


def save_trace_raw(path, trace: ActivationTrace, sites: list[str]) -> int:
    ids = {s: i for i, s in enumerate(sites)}
    return write_raw(path, ((ids[s], t, a) for s, t, a in (trace.raw or [])))


def write_trace_csv(path, trace: ActivationTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "t", "min", "max", "mean", "var", "count"])
        for (site, t), st in sorted(trace.stats.items(), key=lambda kv: (trace.sites.index(kv[0][0]), kv[0][1])):
            w.writerow([site, t, repr(st.min), repr(st.max), repr(st.mean), repr(st.var), st.count])


def read_trace_csv(path) -> ActivationTrace:
    trace = ActivationTrace()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            n = int(r["count"])
            trace.stats[(r["site"], int(r["t"]))] = RunningStats(n, float(r["mean"]), float(r["var"]) * n, float(r["min"]), float(r["max"]))
    return trace


def write_table_csv(path, table: IntervalTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "t", "interval", "zero_offset"])
        for site, col in table.intervals.items():
            z = table.zero_offsets.get(site, 0.0)
            for t, s in enumerate(col):
                w.writerow([site, t, f"{float(s):.9g}", f"{float(z):.9g}"])


def read_table_csv(path) -> IntervalTable:
    cols: dict[str, dict[int, np.float32]] = {}
    zeros: dict[str, float] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            cols.setdefault(r["site"], {})[int(r["t"])] = np.float32(float(r["interval"]))
            zeros[r["site"]] = float(np.float32(float(r["zero_offset"])))
    T = None
    table = IntervalTable(T=0, zero_offsets=zeros)
    for site, entries in cols.items():
        n = len(entries)
        if sorted(entries) != list(range(n)):
            raise FormatError(f"{path}: steps for site {site} are not 0..{n - 1}")
        if T is not None and n != T:
            raise FormatError(f"{path}: sites have different step counts")
        T = n
        table.intervals[site] = np.array([entries[t] for t in range(n)], dtype=np.float32)
    table.T = T or 0
    return table


def write_samples_csv(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float32)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([f"{float(v):.9g}" for v in row])


def read_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[np.float32(float(v)) for v in r] for r in rows], dtype=np.float32)
