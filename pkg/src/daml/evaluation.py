"""One-shot evaluation: adapt (or condition) on a human demo, then roll out.

Per task: pick one human demonstration, derive the acting policy from it once,
and run several seeded trials.  Failures split into task identification (the
distractor moved more than the target: the policy pushed the wrong object)
and control (right object, insufficient push).  All randomness derives from
(seed, task_index, stream, trial) tuples, so tasks are independent of each
other and of trial count; results are merged in task-index order whether or
not tasks ran in parallel.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass

import numpy as np

from . import baselines, metalearn, sim
from .adaptloss import load_adapt_loss
from .config import ADAPTIVE_METHODS, RunConfig
from .dataio import Dataset, ModelFile, TaskRecord
from .policy import make_policy_driver

STREAM_PICK, STREAM_ADAPTED, STREAM_UNADAPTED = 0, 1, 2


@dataclass
class RolloutRecord:
    task_index: int
    trial: int
    arm: str             # "adapted" | "unadapted"
    success: bool
    failure: str         # "none" | "task_identification" | "control"
    target_moved: float
    distractor_moved: float
    steps: int


def classify_failure(traj: sim.Trajectory, succeeded: bool) -> tuple[str, float, float]:
    tgt = float(np.linalg.norm(traj.target[-1] - traj.target[0]))
    dis = float(np.linalg.norm(traj.distractor[-1] - traj.distractor[0]))
    if succeeded:
        return "none", tgt, dis
    return ("task_identification" if dis > tgt else "control"), tgt, dis


def conditioned_driver_factory(model: ModelFile, rc: RunConfig,
                               human_frames_u8: np.ndarray,
                               pick_rng: np.random.Generator):
    """Condition on the demo once; returns factory(rng) -> sim driver.

    The expensive part (gradient adaptation for the adaptive methods) runs
    here, not per trial; only the action-sampling rng is fresh per rollout.
    """
    bc = rc.meta.bc_mode
    idx = metalearn.subsample_indices(pick_rng, human_frames_u8.shape[0],
                                      rc.meta.demo_subsample)
    sub = human_frames_u8[idx]
    if model.method in ADAPTIVE_METHODS:
        loss_obj = load_adapt_loss(model.method, model.psi, rc.loss_net)
        phi = metalearn.meta_test_adapt(model.theta, loss_obj,
                                        metalearn.frames_to_tensor(sub),
                                        rc.meta, rc.policy)
        return lambda rng: make_policy_driver(phi, rc.policy, rng, bc)
    if model.method == "contextual":
        return lambda rng: baselines.make_contextual_driver(
            model.theta, rc.policy, sub, rng, bc)
    if model.method == "recurrent":
        return lambda rng: baselines.make_recurrent_driver(
            model.theta, rc.policy, sub, rng, bc)
    raise ValueError(f"unknown method {model.method!r}")


def unadapted_driver_factory(model: ModelFile, rc: RunConfig):
    """The initialization alone, with no demonstration information.

    For the adaptive methods this is theta without the inner step.  For the
    baselines conditioning is structural, so the nearest analog is a blank
    demonstration.
    """
    bc = rc.meta.bc_mode
    if model.method in ADAPTIVE_METHODS:
        return lambda rng: make_policy_driver(model.theta, rc.policy, rng, bc)
    hw = rc.sim.image_hw
    blank = np.zeros((1, hw, hw, 3), dtype=np.uint8)
    if model.method == "contextual":
        return lambda rng: baselines.make_contextual_driver(
            model.theta, rc.policy, blank, rng, bc)
    return lambda rng: baselines.make_recurrent_driver(
        model.theta, rc.policy, blank, rng, bc)


def _run_trials(factory, rec: TaskRecord, rc: RunConfig, trials: int,
                task_index: int, arm: str, seed: int, stream: int
                ) -> list[RolloutRecord]:
    out = []
    scfg = rc.sim
    for trial in range(trials):
        roll_rng = np.random.default_rng([seed, task_index, stream, trial])
        traj = sim.run_episode(scfg, rec.task, sim.robot_style(),
                               factory(roll_rng), scfg.horizon)
        ok = sim.success(traj.target[1:], rec.task, scfg)
        kind, tgt, dis = classify_failure(traj, ok)
        out.append(RolloutRecord(task_index=task_index, trial=trial, arm=arm,
                                 success=ok, failure=kind, target_moved=tgt,
                                 distractor_moved=dis, steps=len(traj)))
    return out


def evaluate_task(model: ModelFile, rc: RunConfig, rec: TaskRecord,
                  task_index: int, trials: int, seed: int,
                  include_unadapted: bool) -> list[RolloutRecord]:
    """All rollouts for one task; pure given its arguments."""
    if not rec.humans:
        raise ValueError(f"task {task_index} has no human demos")
    pick_rng = np.random.default_rng([seed, task_index, STREAM_PICK])
    human = rec.humans[int(pick_rng.integers(len(rec.humans)))]
    factory = conditioned_driver_factory(model, rc, human.frames, pick_rng)
    records = _run_trials(factory, rec, rc, trials, task_index, "adapted",
                          seed, STREAM_ADAPTED)
    if include_unadapted:
        records.extend(_run_trials(unadapted_driver_factory(model, rc), rec,
                                   rc, trials, task_index, "unadapted",
                                   seed, STREAM_UNADAPTED))
    return records


_POOL_CTX: dict = {}


def _pool_init(model, rc, tasks, trials, seed, include_unadapted):
    _POOL_CTX.update(model=model, rc=rc, tasks=tasks, trials=trials,
                     seed=seed, include_unadapted=include_unadapted)


def _pool_task(ti: int) -> list[RolloutRecord]:
    c = _POOL_CTX
    return evaluate_task(c["model"], c["rc"], c["tasks"][ti], ti,
                         c["trials"], c["seed"], c["include_unadapted"])


def evaluate_model(model: ModelFile, rc: RunConfig, ds: Dataset, split: str,
                   trials: int, seed: int, include_unadapted: bool = False,
                   workers: int = 1) -> tuple[dict, list[RolloutRecord]]:
    tasks = ds.tasks(split)
    if not tasks:
        raise ValueError(f"split {split!r} is empty")
    if trials < 1:
        raise ValueError("need at least one trial per task")
    records: list[RolloutRecord] = []
    if workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_pool_init,
                      initargs=(model, rc, tasks, trials, seed,
                                include_unadapted)) as pool:
            for chunk in pool.map(_pool_task, range(len(tasks))):
                records.extend(chunk)
    else:
        for ti, rec in enumerate(tasks):
            records.extend(evaluate_task(model, rc, rec, ti, trials, seed,
                                         include_unadapted))
    report = build_report(model.method, split, trials, len(tasks), records)
    return report, records


def _arm_summary(records: list[RolloutRecord], n_tasks: int) -> dict:
    succ = sum(r.success for r in records)
    per_task = []
    for ti in range(n_tasks):
        rows = [r for r in records if r.task_index == ti]
        per_task.append(sum(r.success for r in rows) / max(len(rows), 1))
    return {
        "rollouts": len(records),
        "successes": succ,
        "success_rate": succ / max(len(records), 1),
        "failures": {
            "task_identification": sum(r.failure == "task_identification"
                                       for r in records),
            "control": sum(r.failure == "control" for r in records),
        },
        "per_task_success": per_task,
    }


def build_report(method: str, split: str, trials: int, n_tasks: int,
                 records: list[RolloutRecord]) -> dict:
    """Aggregate rollouts into the JSON-ready report; contains no timestamps
    or host details, so identical runs serialize identically."""
    adapted = [r for r in records if r.arm == "adapted"]
    unadapted = [r for r in records if r.arm == "unadapted"]
    report = {
        "method": method,
        "split": split,
        "trials_per_task": trials,
        "n_tasks": n_tasks,
        "adapted": _arm_summary(adapted, n_tasks),
    }
    if unadapted:
        report["unadapted"] = _arm_summary(unadapted, n_tasks)
    return report


ROLLOUT_COLUMNS = ("task_index", "trial", "arm", "success", "failure",
                   "target_moved", "distractor_moved", "steps")


def rollout_csv(records: list[RolloutRecord]) -> str:
    lines = [",".join(ROLLOUT_COLUMNS)]
    for r in records:
        lines.append(",".join([
            str(r.task_index), str(r.trial), r.arm, str(int(r.success)),
            r.failure, f"{r.target_moved:.9f}", f"{r.distractor_moved:.9f}",
            str(r.steps)]))
    return "\n".join(lines) + "\n"
