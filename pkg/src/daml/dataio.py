"""Binary dataset and model files.

Little-endian throughout.  Both formats are designed for bit-exact round
trips: loading a file and saving the result reproduces the original bytes,
and identical generation seeds reproduce identical files.
"""

from __future__ import annotations

import io
import multiprocessing as mp
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterVector
from .sim import (SHAPES, HumanDemo, RobotDemo, TaskSpec,
                  demonstrator_style_pool, gen_demo, robot_style, sample_task)

DATASET_MAGIC = b"DAML"
MODEL_MAGIC = b"DAMLMDL"
DATASET_VERSION = 1
MODEL_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class TaskRecord:
    task: TaskSpec
    humans: list
    robots: list


@dataclass
class Dataset:
    image_hw: int
    n_human_per_task: int
    n_robot_per_task: int
    train: list
    heldout: list

    def tasks(self, split: str):
        if split == "train":
            return self.train
        if split == "heldout":
            return self.heldout
        raise ValueError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# low-level helpers


def _w_u32(buf, *vals):
    buf.write(struct.pack("<" + "I" * len(vals), *vals))


def _r_u32(buf, n=1):
    vals = struct.unpack("<" + "I" * n, _take(buf, 4 * n))
    return vals[0] if n == 1 else vals


def _w_f64s(buf, values):
    arr = np.asarray(values, dtype="<f8")
    buf.write(arr.tobytes())


def _r_f64s(buf, n):
    return np.frombuffer(_take(buf, 8 * n), dtype="<f8").copy()


def _w_str(buf, s: str):
    raw = s.encode("utf-8")
    _w_u32(buf, len(raw))
    buf.write(raw)


def _r_str(buf) -> str:
    return _take(buf, _r_u32(buf)).decode("utf-8")


def _w_array(buf, arr: np.ndarray, dtype: str):
    arr = np.ascontiguousarray(arr.astype(dtype))
    _w_u32(buf, arr.ndim, *arr.shape)
    buf.write(arr.tobytes())


def _r_array(buf, dtype: str) -> np.ndarray:
    ndim = _r_u32(buf)
    if ndim == 0:
        shape = ()
    elif ndim == 1:
        shape = (_r_u32(buf),)
    else:
        shape = tuple(_r_u32(buf, ndim))
    count = int(np.prod(shape))
    item = np.dtype(dtype).itemsize
    return np.frombuffer(_take(buf, count * item), dtype=dtype).reshape(shape).copy()


def _take(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("truncated file")
    return raw


# ---------------------------------------------------------------------------
# dataset format


def _write_task(buf, rec: TaskRecord):
    t = rec.task
    buf.write(struct.pack("<BBB", 0 if t.split == "train" else 1,
                          SHAPES.index(t.target_shape),
                          SHAPES.index(t.distractor_shape)))
    _w_f64s(buf, list(t.target_color) + list(t.distractor_color))
    _w_f64s(buf, list(t.target_pos0) + list(t.distractor_pos0)
            + list(t.goal) + list(t.gripper_start))
    _w_u32(buf, len(rec.humans), len(rec.robots))
    for h in rec.humans:
        _w_u32(buf, h.style_id)
        _w_array(buf, h.frames, "u1")
    for r in rec.robots:
        _w_u32(buf, r.style_id)
        _w_array(buf, r.frames, "u1")
        _w_array(buf, r.states, "<f4")
        _w_array(buf, r.actions, "<f4")
        _w_array(buf, r.final_pose, "<f4")


def _read_task(buf) -> TaskRecord:
    split_id, tgt_shape, dis_shape = struct.unpack("<BBB", _take(buf, 3))
    colors = _r_f64s(buf, 6)
    layout = _r_f64s(buf, 8)
    task = TaskSpec(split="train" if split_id == 0 else "heldout",
                    target_shape=SHAPES[tgt_shape],
                    distractor_shape=SHAPES[dis_shape],
                    target_color=tuple(colors[:3]),
                    distractor_color=tuple(colors[3:]),
                    target_pos0=tuple(layout[0:2]),
                    distractor_pos0=tuple(layout[2:4]),
                    goal=tuple(layout[4:6]),
                    gripper_start=tuple(layout[6:8]))
    n_h, n_r = _r_u32(buf, 2)
    humans, robots = [], []
    for _ in range(n_h):
        style = _r_u32(buf)
        humans.append(HumanDemo(frames=_r_array(buf, "u1"), style_id=style))
    for _ in range(n_r):
        style = _r_u32(buf)
        robots.append(RobotDemo(frames=_r_array(buf, "u1"),
                                states=_r_array(buf, "<f4"),
                                actions=_r_array(buf, "<f4"),
                                final_pose=_r_array(buf, "<f4"),
                                style_id=style))
    return TaskRecord(task=task, humans=humans, robots=robots)


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    _w_u32(buf, DATASET_VERSION, ds.image_hw, ds.image_hw,
           len(ds.train), len(ds.heldout),
           ds.n_human_per_task, ds.n_robot_per_task)
    for rec in ds.train:
        _write_task(buf, rec)
    for rec in ds.heldout:
        _write_task(buf, rec)
    return buf.getvalue()


def save_dataset(path: str, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if _take(buf, 4) != DATASET_MAGIC:
        raise FormatError("not a dataset file")
    version, h, w, n_train, n_heldout, n_h, n_r = _r_u32(buf, 7)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if h != w:
        raise FormatError("images must be square")
    train = [_read_task(buf) for _ in range(n_train)]
    heldout = [_read_task(buf) for _ in range(n_heldout)]
    if buf.read(1):
        raise FormatError("trailing bytes after dataset payload")
    return Dataset(image_hw=h, n_human_per_task=n_h, n_robot_per_task=n_r,
                   train=train, heldout=heldout)


# ---------------------------------------------------------------------------
# model format


def _write_pv(buf, pv: ParameterVector):
    _w_u32(buf, len(pv))
    for name, t in pv.items():
        _w_str(buf, name)
        _w_array(buf, t.data, "<f8")


def _read_pv(buf) -> ParameterVector:
    n = _r_u32(buf)
    entries = []
    for _ in range(n):
        name = _r_str(buf)
        entries.append((name, T.parameter(_r_array(buf, "<f8"))))
    return ParameterVector(entries)


@dataclass
class ModelFile:
    method: str
    config_hash: str
    config_json: str
    theta: ParameterVector
    psi: ParameterVector | None = None


def model_bytes(m: ModelFile) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    _w_u32(buf, MODEL_VERSION)
    _w_str(buf, m.method)
    _w_str(buf, m.config_hash)
    _w_str(buf, m.config_json)
    _w_u32(buf, 1 if m.psi is not None else 0)
    _write_pv(buf, m.theta)
    if m.psi is not None:
        _write_pv(buf, m.psi)
    return buf.getvalue()


def save_model(path: str, m: ModelFile) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(m))


def load_model(path: str) -> ModelFile:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if _take(buf, len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise FormatError("not a model file")
    version = _r_u32(buf)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    method = _r_str(buf)
    config_hash = _r_str(buf)
    config_json = _r_str(buf)
    has_psi = _r_u32(buf)
    theta = _read_pv(buf)
    psi = _read_pv(buf) if has_psi else None
    if buf.read(1):
        raise FormatError("trailing bytes after model payload")
    return ModelFile(method=method, config_hash=config_hash,
                     config_json=config_json, theta=theta, psi=psi)


# ---------------------------------------------------------------------------
# dataset generation

SPLIT_CODES = {"train": 0, "heldout": 1}


def generate_task_record(scfg, dcfg, split: str, task_index: int,
                         seed: int) -> TaskRecord:
    """One task with its demos, from a seed derived per (split, index).

    Tasks are mutually independent: adding tasks or reordering generation
    cannot change any record, and parallel generation merged in index order
    is byte-identical to the serial loop.
    """
    rng = np.random.default_rng([seed, SPLIT_CODES[split], task_index])
    task = sample_task(scfg, rng, split)
    pool = demonstrator_style_pool(scfg)
    humans = [gen_demo(scfg, task, pool[int(rng.integers(len(pool)))],
                       False, rng)
              for _ in range(dcfg.n_human_per_task)]
    robots = [gen_demo(scfg, task, robot_style(), True, rng)
              for _ in range(dcfg.n_robot_per_task)]
    return TaskRecord(task=task, humans=humans, robots=robots)


def generate_dataset(scfg, dcfg, seed: int, workers: int = 1) -> Dataset:
    jobs = ([(scfg, dcfg, "train", i, seed) for i in range(dcfg.n_train_tasks)]
            + [(scfg, dcfg, "heldout", i, seed)
               for i in range(dcfg.n_heldout_tasks)])
    if workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers) as pool:
            records = pool.starmap(generate_task_record, jobs)
    else:
        records = [generate_task_record(*j) for j in jobs]
    return Dataset(image_hw=scfg.image_hw,
                   n_human_per_task=dcfg.n_human_per_task,
                   n_robot_per_task=dcfg.n_robot_per_task,
                   train=records[:dcfg.n_train_tasks],
                   heldout=records[dcfg.n_train_tasks:])
