"""Incremental scenario construction and split-manifest persistence.

Three ways of distributing a dataset over incremental tasks:

* overlapped: an image joins every task that introduces one of its classes,
  so the same image can reappear later with different labels.
* disjoint: an image joins a task only if that task introduces one of its
  classes and all its classes are already introduced; images with
  not-yet-seen classes are excluded.
* partitioned: every image is assigned to exactly one of its classes (chosen
  deterministically from a seed) and joins only that class's task, keeping
  the task datasets disjoint while both past and future classes still end up
  as background pixels after relabeling.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, ValidationError
from .manifest import DatasetManifest
from .tasks import TaskSpec, task_classes, task_of_class

SCENARIO_KINDS = ("overlapped", "disjoint", "partitioned")


@dataclass(frozen=True)
class TaskSplit:
    task_index: int
    classes: tuple[int, ...]
    image_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitManifest:
    scenario: str
    spec: TaskSpec
    tasks: tuple[TaskSplit, ...]
    seed: int | None = None
    assignments: dict[str, int] | None = None

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIO_KINDS:
            raise ValidationError(f"unknown scenario kind {self.scenario!r}")
        if self.scenario == "partitioned":
            if self.assignments is None:
                raise ValidationError("partitioned split requires assignments")
            seen: set[str] = set()
            for task in self.tasks:
                overlap = seen.intersection(task.image_ids)
                if overlap:
                    raise ValidationError(
                        f"partitioned task lists overlap on {sorted(overlap)[:3]}"
                    )
                seen.update(task.image_ids)
                block = set(task.classes)
                for image_id in task.image_ids:
                    assigned = self.assignments.get(image_id)
                    if assigned not in block:
                        raise ValidationError(
                            f"image {image_id!r} sits in task {task.task_index} but is "
                            f"assigned class {assigned}"
                        )
        elif self.seed is not None or self.assignments is not None:
            raise ValidationError(f"{self.scenario} split carries no seed or assignments")

    def task(self, t: int) -> TaskSplit:
        if not 0 <= t < len(self.tasks):
            raise ValidationError(f"task index {t} outside 0..{len(self.tasks) - 1}")
        return self.tasks[t]

    def task_ids(self, t: int) -> tuple[str, ...]:
        return self.task(t).image_ids

    def membership(self) -> dict[str, list[int]]:
        """Map image id to the sorted task indices containing it."""
        out: dict[str, list[int]] = {}
        for task in self.tasks:
            for image_id in task.image_ids:
                out.setdefault(image_id, []).append(task.task_index)
        return out


def _tasks_from_membership(spec: TaskSpec, member: dict[int, list[str]]) -> tuple[TaskSplit, ...]:
    return tuple(
        TaskSplit(
            task_index=t,
            classes=tuple(sorted(task_classes(spec, t))),
            image_ids=tuple(sorted(member.get(t, []))),
        )
        for t in range(spec.num_tasks)
    )


def build_overlapped(manifest: DatasetManifest, spec: TaskSpec) -> SplitManifest:
    """An image joins task t iff it contains a class introduced at t."""
    _check_spec(manifest, spec)
    member: dict[int, list[str]] = {}
    class_task = {c: task_of_class(spec, c) for c in range(1, spec.class_count + 1)}
    for rec in manifest.records:
        for t in {class_task[c] for c in rec.oracle_classes}:
            member.setdefault(t, []).append(rec.image_id)
    return SplitManifest(scenario="overlapped", spec=spec, tasks=_tasks_from_membership(spec, member))


def build_disjoint(manifest: DatasetManifest, spec: TaskSpec) -> SplitManifest:
    """Like overlapped, but only once every class of the image has been introduced."""
    _check_spec(manifest, spec)
    member: dict[int, list[str]] = {}
    class_task = {c: task_of_class(spec, c) for c in range(1, spec.class_count + 1)}
    for rec in manifest.records:
        tasks_present = {class_task[c] for c in rec.oracle_classes}
        # membership requires all of the image's classes introduced already,
        # which leaves exactly the task introducing its latest class
        member.setdefault(max(tasks_present), []).append(rec.image_id)
    return SplitManifest(scenario="disjoint", spec=spec, tasks=_tasks_from_membership(spec, member))


def assign_partition_class(seed: int, image_id: str, classes: frozenset[int] | set[int]) -> int:
    """Deterministic uniform pick of one class for an image.

    Hashing (seed, image id) keeps the choice independent of record order, so
    rebuilding from a shuffled manifest yields the same split.
    """
    candidates = sorted(classes)
    if not candidates:
        raise ValidationError(f"image {image_id!r} has no classes to assign")
    digest = hashlib.blake2b(
        seed.to_bytes(8, "big") + image_id.encode("utf-8"), digest_size=16
    ).digest()
    return candidates[int.from_bytes(digest, "big") % len(candidates)]


def build_partitioned(
    manifest: DatasetManifest,
    spec: TaskSpec,
    seed: int,
    assignments: dict[str, int] | None = None,
) -> SplitManifest:
    """Assign each image to exactly one of its classes and to that class's task.

    `assignments` optionally pins specific images to a class (validated to be
    one of the image's oracle classes); the rest are drawn from the seed.
    """
    _check_spec(manifest, spec)
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    forced = dict(assignments or {})
    for image_id in forced:
        manifest.record(image_id)
    member: dict[int, list[str]] = {}
    chosen: dict[str, int] = {}
    class_task = {c: task_of_class(spec, c) for c in range(1, spec.class_count + 1)}
    for rec in manifest.records:
        if rec.image_id in forced:
            cls = int(forced[rec.image_id])
            if cls not in rec.oracle_classes:
                raise ValidationError(
                    f"forced assignment {rec.image_id!r} -> {cls} is not an oracle class"
                )
        else:
            cls = assign_partition_class(seed, rec.image_id, rec.oracle_classes)
        chosen[rec.image_id] = cls
        member.setdefault(class_task[cls], []).append(rec.image_id)
    return SplitManifest(
        scenario="partitioned",
        spec=spec,
        tasks=_tasks_from_membership(spec, member),
        seed=seed,
        assignments=chosen,
    )


def split_overlapping(
    manifest: DatasetManifest, spec: TaskSpec, t: int, seed: int
) -> tuple[frozenset[str], frozenset[str]]:
    """Halve the overlap between consecutive overlapped tasks t-1 and t.

    The overlap is shuffled with the seed and cut in two; the first half is
    the seen part and takes the extra element when the overlap is odd.
    """
    if t < 1:
        raise ValidationError(f"need a consecutive task pair, got t={t}")
    split = build_overlapped(manifest, spec)
    prev_ids = set(split.task_ids(t - 1))
    overlap = sorted(prev_ids.intersection(split.task_ids(t)))
    random.Random(seed).shuffle(overlap)
    cut = (len(overlap) + 1) // 2
    return frozenset(overlap[:cut]), frozenset(overlap[cut:])


def save_split(split: SplitManifest, path: str | os.PathLike) -> None:
    doc: dict = {
        "scenario": split.scenario,
        "base_count": split.spec.base_count,
        "step": split.spec.step,
        "class_order": list(split.spec.class_order),
        "tasks": [
            {"t": task.task_index, "classes": list(task.classes), "image_ids": list(task.image_ids)}
            for task in split.tasks
        ],
    }
    if split.scenario == "partitioned":
        doc["seed"] = split.seed
        doc["assignments"] = {k: split.assignments[k] for k in sorted(split.assignments)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path: str | os.PathLike) -> SplitManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read split manifest ({exc})") from exc
    try:
        scenario = doc["scenario"]
        spec = TaskSpec(
            base_count=doc["base_count"],
            step=doc["step"],
            class_order=tuple(doc["class_order"]),
        )
        tasks = tuple(
            TaskSplit(
                task_index=entry["t"],
                classes=tuple(entry["classes"]),
                image_ids=tuple(entry["image_ids"]),
            )
            for entry in doc["tasks"]
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: split manifest missing field ({exc})") from exc

    if scenario not in SCENARIO_KINDS:
        raise FormatError(f"{path}: unknown scenario kind {scenario!r}")
    if len(tasks) != spec.num_tasks or [task.task_index for task in tasks] != list(range(spec.num_tasks)):
        raise FormatError(f"{path}: task list does not cover tasks 0..{spec.task_count}")
    for task in tasks:
        if set(task.classes) != task_classes(spec, task.task_index):
            raise FormatError(
                f"{path}: task {task.task_index} class set does not match the layout"
            )
    seed = doc.get("seed")
    assignments = doc.get("assignments")
    if scenario == "partitioned":
        if seed is None or assignments is None:
            raise FormatError(f"{path}: partitioned split requires seed and assignments")
        assignments = {str(k): int(v) for k, v in assignments.items()}
    try:
        return SplitManifest(
            scenario=scenario, spec=spec, tasks=tasks, seed=seed, assignments=assignments
        )
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _check_spec(manifest: DatasetManifest, spec: TaskSpec) -> None:
    if spec.class_count != manifest.class_count:
        raise ValidationError(
            f"task layout covers {spec.class_count} classes, manifest declares {manifest.class_count}"
        )
