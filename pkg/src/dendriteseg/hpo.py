"""Asynchronous successive halving (ASHA) over the training hyperparameters,
plus the two-step search-then-finetune workflow.

The scheduler is a decision service: ``asha_next``/``report`` own all state
mutation and are serialized by the driver (virtual round-robin executor or a
thread pool under one lock). Trial executors only train and report.

Resource is epochs. The rung ladder is r, r*eta, r*eta^2, ... capped at the
top of the epochs range; each trial additionally stops at its own sampled
epoch count. A paused trial is promotable from rung k while its score ranks
in the top floor(n_k / eta) of the n_k scores recorded at that rung;
promotions are scanned deepest rung first and take the best qualifying
score. Scores are validation IoU (higher is better). Failed trials score
-inf and never promote; their budget is not refunded.

Every decision appends to an event log (JSON-lines serializable) that is
sufficient to replay and audit each promotion after the fact.
"""

import json
import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from . import pipeline
from .errors import (
    AllTrialsFailed,
    ConfigInvalid,
    FrozenHyperparamChanged,
    InconsistentState,
    IoFailure,
    WrongRungBoundary,
)
from .models import ModelCheckpoint, build_from_config, default_config
from .pipeline import AugmentationSpec, TrainConfig, TrainState

AUGMENT_TOGGLES = ("flip_x", "flip_y", "flip_z", "rotation", "shear", "brightness", "contrast")


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple = (1e-5, 1e-2)  # log-uniform bounds
    patch_width: tuple = (32, 64)  # choice set (square xy patches)
    overlap: tuple = (0, 8)  # choice set, voxels in x and y
    epochs: tuple = (2, 8)  # inclusive integer range; the top is ASHA's R
    batch_size: tuple = (2, 4)  # choice set
    augmentations: tuple = AUGMENT_TOGGLES  # toggles sampled independently
    patch_depth: int = 4

    def __post_init__(self):
        lo, hi = self.learning_rate
        if not 0 < lo <= hi:
            raise ConfigInvalid(f"learning-rate bounds must be positive, got {self.learning_rate}")
        if not self.patch_width or not self.batch_size:
            raise ConfigInvalid("patch_width and batch_size choice sets must be non-empty")
        e_lo, e_hi = self.epochs
        if not 1 <= e_lo <= e_hi:
            raise ConfigInvalid(f"bad epochs range {self.epochs}")
        if any(o < 0 for o in self.overlap) or not self.overlap:
            raise ConfigInvalid(f"bad overlap choices {self.overlap}")
        if not set(self.augmentations) <= set(AUGMENT_TOGGLES):
            raise ConfigInvalid(f"unknown augmentation toggles in {self.augmentations}")


def sample_config(space: SearchSpace, rng) -> dict:
    """One independent draw per field; learning rate is log-uniform."""
    lr = float(10 ** rng.uniform(math.log10(space.learning_rate[0]), math.log10(space.learning_rate[1])))
    patch_width = int(space.patch_width[rng.integers(len(space.patch_width))])
    overlap = int(space.overlap[rng.integers(len(space.overlap))])
    epochs = int(rng.integers(space.epochs[0], space.epochs[1] + 1))
    batch_size = int(space.batch_size[rng.integers(len(space.batch_size))])
    toggles = [t for t in space.augmentations if rng.random() < 0.5]
    return {
        "learning_rate": lr,
        "patch_width": patch_width,
        "overlap": overlap,
        "epochs": epochs,
        "batch_size": batch_size,
        "augmentations": toggles,
    }


def augment_spec_from_toggles(toggles, seed: int):
    flips = tuple(a for a in ("x", "y", "z") if f"flip_{a}" in toggles)
    rotation = 45.0 if "rotation" in toggles else 0.0
    shear = 30.0 if "shear" in toggles else 0.0
    brightness = 0.1 if "brightness" in toggles else 0.0
    contrast = (0.9, 1.1) if "contrast" in toggles else (1.0, 1.0)
    if not flips and rotation == 0 and shear == 0 and brightness == 0 and contrast == (1.0, 1.0):
        return None
    return AugmentationSpec(
        flips=flips,
        rotation_max_deg=rotation,
        shear_max_deg=shear,
        brightness_delta=brightness,
        contrast_range=contrast,
        seed=seed,
    )


def train_config_from_trial(config: dict, space: SearchSpace, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=config["learning_rate"],
        epochs=config["epochs"],
        batch_size=config["batch_size"],
        patch_dims=(config["patch_width"], config["patch_width"], space.patch_depth),
        overlap=(config["overlap"], config["overlap"], 0),
        augment=augment_spec_from_toggles(config["augmentations"], seed),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# scheduler state


@dataclass
class Trial:
    id: int
    config: dict
    status: str = "running"  # running | paused_at_rung | completed | failed
    rung: int = -1  # ladder index of the last boundary reached
    resource: int = 0  # epochs consumed
    best_score: float = -math.inf
    rung_scores: dict = field(default_factory=dict)  # ladder index -> score


@dataclass(frozen=True)
class Promote:
    trial_id: int
    target_resource: int


@dataclass(frozen=True)
class StartNew:
    trial_id: int
    config: dict
    target_resource: int


@dataclass(frozen=True)
class Wait:
    pass


@dataclass(frozen=True)
class Stop:
    pass


def rung_ladder(min_resource: int, eta: int, max_resource: int):
    ladder = []
    v = min_resource
    while v < max_resource:
        ladder.append(v)
        v *= eta
    ladder.append(max_resource)
    return ladder


class AshaState:
    """Bookkeeping for one ASHA run; mutate only via asha_next/report/fail."""

    def __init__(self, space: SearchSpace, budget: int, eta: int = 2, min_resource: int = 1, seed: int = 0):
        if budget < 1:
            raise ConfigInvalid("budget must be >= 1")
        if eta < 2:
            raise ConfigInvalid("eta must be >= 2")
        self.space = space
        self.budget = budget
        self.eta = eta
        self.ladder = rung_ladder(min_resource, eta, space.epochs[1])
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 424243]))
        self.trials: list[Trial] = []
        self.rung_scores = [[] for _ in self.ladder]  # (score, trial_id) per rung
        self.started = 0
        self.stopped = False
        self.events: list[dict] = []

    # -- helpers ----------------------------------------------------------

    def trial(self, trial_id: int) -> Trial:
        return self.trials[trial_id]

    def _boundaries(self, trial: Trial):
        epochs = trial.config["epochs"]
        return [v for v in self.ladder if v < epochs] + [epochs]

    def next_boundary(self, trial: Trial):
        for b in self._boundaries(trial):
            if b > trial.resource:
                return b
        return None

    def _rank_at(self, rung: int, score: float) -> int:
        return 1 + sum(1 for s, _ in self.rung_scores[rung] if s > score)

    def _promotable_at(self, rung: int):
        n_k = len(self.rung_scores[rung])
        top = n_k // self.eta
        if top == 0:
            return []
        out = []
        for trial in self.trials:
            if trial.status != "paused_at_rung" or trial.rung != rung:
                continue
            score = trial.rung_scores[rung]
            if self._rank_at(rung, score) <= top:
                out.append((score, -trial.id, trial))
        return out

    def all_terminal(self) -> bool:
        return all(t.status in ("completed", "failed") for t in self.trials)

    def any_running(self) -> bool:
        return any(t.status == "running" for t in self.trials)

    def _promote(self, trial: Trial, rung: int, uncontested: bool) -> Promote:
        target = min(self.ladder[rung + 1], trial.config["epochs"])
        trial.status = "running"
        event = {
            "event": "promote",
            "trial": trial.id,
            "rung": rung,
            "score": trial.rung_scores[rung],
            "to_resource": target,
        }
        if uncontested:
            event["uncontested"] = True
        self.events.append(event)
        return Promote(trial_id=trial.id, target_resource=target)


def asha_next(state: AshaState):
    """Next scheduling action: Promote > StartNew > drain > Wait/Stop.

    Rank promotions follow the top-floor(n/eta) rule. When the budget is
    exhausted, nothing is running or rank-promotable, and no trial has
    completed yet, the best paused trial is promoted uncontested so the
    search always ends with a winner (a budget of 1 then degenerates to a
    single full training run). Uncontested promotions are flagged in the
    event log and cannot occur once any trial has completed.
    """
    for rung in reversed(range(len(state.ladder) - 1)):
        candidates = state._promotable_at(rung)
        if not candidates:
            continue
        _, _, trial = max(candidates)
        return state._promote(trial, rung, uncontested=False)
    if state.started < state.budget:
        config = sample_config(state.space, state.rng)
        trial = Trial(id=state.started, config=config)
        state.trials.append(trial)
        state.started += 1
        target = min(state.ladder[0], config["epochs"])
        state.events.append({"event": "start", "trial": trial.id, "config": config})
        return StartNew(trial_id=trial.id, config=config, target_resource=target)
    if state.any_running():
        return Wait()
    if not any(t.status == "completed" for t in state.trials):
        paused = [
            (t.rung, t.rung_scores[t.rung], -t.id, t)
            for t in state.trials
            if t.status == "paused_at_rung"
        ]
        if paused:
            _, _, _, trial = max(paused)
            return state._promote(trial, trial.rung, uncontested=True)
    if not state.stopped:
        state.stopped = True
        state.events.append({"event": "stop"})
    return Stop()


def report(state: AshaState, trial_id: int, resource: int, score: float) -> None:
    """Record a score at the trial's next rung boundary."""
    trial = state.trial(trial_id)
    if trial.status != "running":
        raise InconsistentState(f"trial {trial_id} reported while {trial.status}")
    expected = state.next_boundary(trial)
    if expected is None or resource != expected:
        raise WrongRungBoundary(
            f"trial {trial_id} reported resource {resource}, expected {expected}"
        )
    trial.resource = resource
    trial.best_score = max(trial.best_score, score)
    rung = state.ladder.index(resource) if resource in state.ladder else None
    if rung is not None:
        state.rung_scores[rung].append((score, trial_id))
        trial.rung = rung
        trial.rung_scores[rung] = score
    done = resource >= trial.config["epochs"]
    trial.status = "completed" if done else "paused_at_rung"
    state.events.append(
        {
            "event": "report",
            "trial": trial_id,
            "rung": rung,
            "resource": resource,
            "score": score,
            "status": trial.status,
        }
    )


def fail_trial(state: AshaState, trial_id: int, reason: str) -> None:
    trial = state.trial(trial_id)
    trial.status = "failed"
    trial.best_score = -math.inf
    state.events.append({"event": "fail", "trial": trial_id, "reason": reason})


def save_event_log(events, path) -> None:
    try:
        with open(path, "w") as f:
            for e in events:
                f.write(json.dumps(e) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write event log {path}: {e}") from e


def load_event_log(path):
    try:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise IoFailure(f"cannot read event log {path}: {e}") from e


def verify_event_log(events, eta: int = 2, budget: int | None = None) -> dict:
    """Replay an event log and check every promotion was justified.

    Rank promotions must have been top-floor(n/eta) among the scores
    recorded at their rung at decision time. Uncontested (drain) promotions
    must have happened with the budget exhausted, nothing running or
    rank-promotable, and nothing completed. Returns summary counts; raises
    InconsistentState on any violation.
    """
    rungs: dict = {}
    trial_rung_scores: dict = {}
    status: dict = {}
    starts = promotions = uncontested = 0
    for e in events:
        if e["event"] == "start":
            starts += 1
            status[e["trial"]] = "running"
        elif e["event"] == "report":
            status[e["trial"]] = e.get("status", "paused_at_rung")
            if e["rung"] is not None:
                rungs.setdefault(e["rung"], []).append((e["score"], e["trial"]))
                trial_rung_scores[(e["trial"], e["rung"])] = e["score"]
        elif e["event"] == "fail":
            status[e["trial"]] = "failed"
        elif e["event"] == "promote":
            promotions += 1
            key = (e["trial"], e["rung"])
            if key not in trial_rung_scores:
                raise InconsistentState(f"promotion of {key} with no recorded score")
            scores = rungs.get(e["rung"], [])
            top = len(scores) // eta
            rank = 1 + sum(1 for s, _ in scores if s > trial_rung_scores[key])
            if e.get("uncontested"):
                uncontested += 1
                if any(v == "running" for v in status.values()):
                    raise InconsistentState("uncontested promotion while trials were running")
                if any(v == "completed" for v in status.values()):
                    raise InconsistentState("uncontested promotion after a completion")
                if budget is not None and starts != budget:
                    raise InconsistentState("uncontested promotion before the budget ran out")
            elif rank > top:
                raise InconsistentState(
                    f"trial {e['trial']} promoted from rung {e['rung']} at rank {rank} > top {top}"
                )
            status[e["trial"]] = "running"
    return {"starts": starts, "promotions": promotions, "uncontested": uncontested}


# ---------------------------------------------------------------------------
# drivers


def _drive_virtual(state: AshaState, runner, workers: int):
    """Deterministic round-robin executor: every task takes one tick."""
    slots = [None] * workers
    resumes: dict = {}
    while True:
        progressed = False
        for i in range(workers):
            if slots[i] is not None:
                trial_id, target = slots[i]
                slots[i] = None
                trial = state.trial(trial_id)
                try:
                    score, resumes[trial_id] = runner.run(
                        trial_id, trial.config, trial.resource, target, resumes.get(trial_id)
                    )
                except Exception as exc:  # noqa: BLE001 - trial failure is data
                    fail_trial(state, trial_id, repr(exc))
                else:
                    report(state, trial_id, target, score)
                progressed = True
                continue
            action = asha_next(state)
            if isinstance(action, (Promote, StartNew)):
                slots[i] = (action.trial_id, action.target_resource)
                progressed = True
        if not progressed:
            action = asha_next(state)
            if isinstance(action, Stop):
                return resumes
            if all(s is None for s in slots):
                raise InconsistentState("scheduler wedged with idle workers")


def _drive_threaded(state: AshaState, runner, workers: int):
    lock = threading.Lock()
    cond = threading.Condition(lock)
    resumes: dict = {}
    errors: list = []

    def worker():
        while True:
            with cond:
                action = asha_next(state)
                while isinstance(action, Wait):
                    cond.wait()
                    action = asha_next(state)
                if isinstance(action, Stop):
                    cond.notify_all()
                    return
                trial = state.trial(action.trial_id)
                config = trial.config
                start_resource = trial.resource
                target = action.target_resource
                resume = resumes.get(action.trial_id)
            try:
                score, resume = runner.run(action.trial_id, config, start_resource, target, resume)
                failed = None
            except Exception as exc:  # noqa: BLE001
                failed = exc
            with cond:
                if failed is None:
                    resumes[action.trial_id] = resume
                    report(state, action.trial_id, target, score)
                else:
                    fail_trial(state, action.trial_id, repr(failed))
                cond.notify_all()

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return resumes


def run_scheduler(space, runner, budget, workers=1, seed=0, eta=2, min_resource=1, threaded=False):
    """Drive ASHA to completion; returns the final AshaState and resume map."""
    state = AshaState(space, budget=budget, eta=eta, min_resource=min_resource, seed=seed)
    drive = _drive_threaded if threaded and workers > 1 else _drive_virtual
    resumes = drive(state, runner, workers)
    return state, resumes


# ---------------------------------------------------------------------------
# trial runners


class TrainingTrialRunner:
    """Runs real training trials, resumable at rung boundaries."""

    def __init__(self, architecture, train_set, val_set, space, seed=0, model_config=None, parent_checkpoint=None, dataset_tag=""):
        self.architecture = architecture
        self.train_set = train_set
        self.val_set = val_set
        self.space = space
        self.seed = seed
        self.model_config = model_config
        self.parent = parent_checkpoint
        self.dataset_tag = dataset_tag

    def _trial_seed(self, trial_id):
        return int(np.random.SeedSequence([self.seed & 0x7FFFFFFF, trial_id]).generate_state(1)[0])

    def run(self, trial_id, config, start_resource, target_resource, resume):
        if resume is None:
            trial_seed = self._trial_seed(trial_id)
            tc = train_config_from_trial(config, self.space, trial_seed)
            if self.parent is not None:
                parent_hp = self.parent.provenance.get("hyperparameters", {})
                if "patch_dims" in parent_hp and list(tc.patch_dims) != list(parent_hp["patch_dims"]):
                    raise FrozenHyperparamChanged(
                        f"trial patch dims {tc.patch_dims} != parent {parent_hp['patch_dims']}"
                    )
                if "batch_size" in parent_hp and tc.batch_size != parent_hp["batch_size"]:
                    raise FrozenHyperparamChanged(
                        f"trial batch size {tc.batch_size} != parent {parent_hp['batch_size']}"
                    )
                model = self.parent.to_model()
            else:
                cfg = self.model_config or default_config(self.architecture)
                model = build_from_config(self.architecture, _cfg_dict(cfg), seed=trial_seed)
            pipeline._check_patch_compat(model, tc)
            train_patches = pipeline._dataset_patches(self.train_set, tc)
            val_patches = pipeline._dataset_patches(self.val_set, tc)
            state = TrainState()
            state.best_arrays = model.param_arrays()
            resume = {"model": model, "state": state, "tc": tc,
                      "train_patches": train_patches, "val_patches": val_patches}
        pipeline.run_epochs(
            resume["model"], resume["state"], resume["tc"],
            resume["train_patches"], resume["val_patches"], target_resource,
        )
        return resume["state"].best_score, resume

    def finalize(self, trial_id, config, resume):
        state = resume["state"]
        model = resume["model"]
        ckpt = ModelCheckpoint(
            architecture=model.architecture,
            config=ModelCheckpoint.from_model(model).config,
            arrays={k: v.copy() for k, v in state.best_arrays.items()},
            provenance={
                "dataset": self.dataset_tag,
                "epochs_trained": state.epoch,
                "best_epoch": state.best_epoch,
                "hyperparameters": resume["tc"].hyperparameters(),
                "trial": trial_id,
                "parent": None if self.parent is None else self.parent.checkpoint_id(),
            },
        )
        return ckpt


def _cfg_dict(cfg):
    from dataclasses import asdict

    return asdict(cfg)


def _selection_iou(ckpt: ModelCheckpoint, val_set, tc: TrainConfig) -> float:
    model = ckpt.to_model()
    images, labels = pipeline._dataset_patches(val_set, tc)
    _, val_iou = pipeline._validate(model, images, labels, tc.batch_size)
    return val_iou


def run_hpo(
    space: SearchSpace,
    architecture: str,
    datasets: dict,
    budget: int = 30,
    workers: int = 1,
    seed: int = 0,
    eta: int = 2,
    min_resource: int = 1,
    threaded: bool = False,
    model_config=None,
    parent_checkpoint=None,
    selection_val_set=None,
    log_path=None,
    dataset_tag: str = "",
):
    """ASHA over real training runs; returns (best checkpoint, AshaState).

    ``datasets`` maps "train" and "val" to volume/label pair lists. Rung
    scores are IoU on datasets["val"]; when ``selection_val_set`` is given
    the winner among completed trials is chosen by IoU on that set instead.
    """
    runner = TrainingTrialRunner(
        architecture,
        datasets["train"],
        datasets["val"],
        space,
        seed=seed,
        model_config=model_config,
        parent_checkpoint=parent_checkpoint,
        dataset_tag=dataset_tag,
    )
    state, resumes = run_scheduler(
        space, runner, budget=budget, workers=workers, seed=seed, eta=eta,
        min_resource=min_resource, threaded=threaded,
    )
    best = None
    for trial in state.trials:
        if trial.status != "completed":
            continue
        ckpt = runner.finalize(trial.id, trial.config, resumes[trial.id])
        if selection_val_set is not None:
            score = _selection_iou(ckpt, selection_val_set, resumes[trial.id]["tc"])
        else:
            score = trial.best_score
        ckpt.provenance["selection_score"] = score
        if best is None or score > best[0]:
            best = (score, trial.id, ckpt)
    if best is None:
        raise AllTrialsFailed("no trial completed")
    if log_path is not None:
        save_event_log(state.events, log_path)
    score, trial_id, ckpt = best
    return ckpt, state


def run_two_step(
    space: SearchSpace,
    architecture: str,
    coarse_sets: dict,
    fine_sets: dict,
    budget_each: int = 30,
    workers: int = 1,
    seed: int = 0,
    eta: int = 2,
    min_resource: int = 1,
    threaded: bool = False,
    model_config=None,
    step2_space: SearchSpace | None = None,
    log_dir=None,
):
    """Search on the coarse dataset, then finetune-search on the fine one.

    Step 1 runs the full space training on coarse data and picks the winner
    by fine-validation IoU. Step 2 freezes patch width and batch size to the
    winner's values, starts every trial from the winner's checkpoint, and
    trains on the fine dataset. Returns (final checkpoint, info dict).
    """
    import os

    log1 = os.path.join(log_dir, "hpo_step1_events.jsonl") if log_dir else None
    log2 = os.path.join(log_dir, "hpo_step2_events.jsonl") if log_dir else None
    step1_ckpt, step1_state = run_hpo(
        space,
        architecture,
        coarse_sets,
        budget=budget_each,
        workers=workers,
        seed=seed,
        eta=eta,
        min_resource=min_resource,
        threaded=threaded,
        model_config=model_config,
        selection_val_set=fine_sets["val"],
        log_path=log1,
        dataset_tag="coarse",
    )
    winner_hp = step1_ckpt.provenance["hyperparameters"]
    frozen_patch = (winner_hp["patch_dims"][0],)
    frozen_batch = (winner_hp["batch_size"],)
    if step2_space is None:
        step2_space = replace(space, patch_width=frozen_patch, batch_size=frozen_batch)
    else:
        if tuple(step2_space.patch_width) != frozen_patch or tuple(step2_space.batch_size) != frozen_batch:
            raise FrozenHyperparamChanged(
                "step-2 space must keep the step-1 winner's patch width and batch size"
            )
    step2_ckpt, step2_state = run_hpo(
        step2_space,
        architecture,
        fine_sets,
        budget=budget_each,
        workers=workers,
        seed=seed + 1,
        eta=eta,
        min_resource=min_resource,
        threaded=threaded,
        model_config=model_config,
        parent_checkpoint=step1_ckpt,
        log_path=log2,
        dataset_tag="fine",
    )
    info = {
        "step1_state": step1_state,
        "step2_state": step2_state,
        "step1_checkpoint": step1_ckpt,
        "step1_selection_score": step1_ckpt.provenance.get("selection_score"),
        "step2_selection_score": step2_ckpt.provenance.get("selection_score"),
    }
    return step2_ckpt, info
