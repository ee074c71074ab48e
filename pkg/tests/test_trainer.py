"""Tests for the training protocol."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch

from mmtpsm.const import Ablation, TrainMode
from mmtpsm.models import AuditEntry, AuditReport, DatasetManifest, MetricReport
from mmtpsm.segmenter import load_checkpoint
from mmtpsm.synth import build_dataset
from mmtpsm.trainer import (
    FINAL_CHECKPOINT,
    REPORT_CSV,
    REPORT_JSON,
    TELEMETRY_FILE,
    RunResult,
    TelemetrySink,
    Trainer,
    gradient_audit,
    learning_rate,
    write_report,
)
from mmtpsm.types import NumericalAbortError

from .helper import small_spec

SPEC = small_spec()

Dataset = tuple[Path, DatasetManifest]


@pytest.fixture(name="dataset", scope="module")
def dataset_fixture(tmp_path_factory: pytest.TempPathFactory) -> Dataset:
    """Return a small dataset written to disk."""
    root = tmp_path_factory.mktemp("dataset")
    config = SPEC.dataset
    manifest = build_dataset(
        config.generator,
        config.n_labeled,
        config.n_unlabeled,
        config.root_seed,
        root,
        config.n_validation,
    )
    return root, manifest


@pytest.fixture(name="full_run", scope="module")
def full_run_fixture(
    dataset: Dataset, tmp_path_factory: pytest.TempPathFactory
) -> RunResult:
    """Return a complete mean teacher run."""
    root, manifest = dataset
    return Trainer(SPEC, manifest, root).run(tmp_path_factory.mktemp("full"))


@pytest.fixture(name="supervised_run", scope="module")
def supervised_run_fixture(
    dataset: Dataset, tmp_path_factory: pytest.TempPathFactory
) -> RunResult:
    """Return a complete supervised only run."""
    root, manifest = dataset
    trainer = Trainer(SPEC, manifest, root, mode=TrainMode.SUPERVISED_ONLY)
    return trainer.run(tmp_path_factory.mktemp("supervised"))


def read_telemetry(path: Path) -> list[dict[str, float]]:
    """Return the telemetry records of a run."""
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


@pytest.mark.parametrize(
    ("t", "result"),
    [(0, 0.01), (29, 0.01), (30, 0.001), (34, 0.001), (35, 0.0001), (39, 0.0001)],
)
def test_learning_rate(t: int, result: float) -> None:
    """Test the step schedule switches at the milestones."""
    assert learning_rate(t, SPEC.train) == result


def test_run_outputs(full_run: RunResult) -> None:
    """Test a run writes checkpoints, telemetry and a report."""
    out_dir = full_run.checkpoint.parent
    assert full_run.checkpoint.name == FINAL_CHECKPOINT
    for t in (10, 20, 30):
        assert (out_dir / f"checkpoint-{t:06d}.pt").exists()
    assert not (out_dir / "checkpoint-000040.pt").exists()
    assert (out_dir / REPORT_JSON).exists()
    assert MetricReport.model_validate_json(
        (out_dir / REPORT_JSON).read_text(encoding="utf-8")
    ) == full_run.report
    assert full_run.state.t == SPEC.train.total_iters
    assert full_run.state.student.is_finite()


def test_run_telemetry(full_run: RunResult) -> None:
    """Test the schedules recorded over a run."""
    records = read_telemetry(full_run.telemetry)
    assert [record["t"] for record in records] == list(range(40))
    for record in records[:20]:
        assert record["lambda"] == 0.0
        assert "l_psm" not in record
    assert records[25]["lambda"] == 1.0
    assert "l_psm" in records[25]
    assert "l_mgd" in records[25]
    assert "alpha" not in records[16]
    assert records[18]["alpha"] == 0.0
    assert records[39]["lr"] == 0.0001


def test_resume(full_run: RunResult, dataset: Dataset, tmp_path: Path) -> None:
    """Test resuming from a checkpoint reproduces the run bitwise."""
    root, manifest = dataset
    checkpoint = full_run.checkpoint.parent / "checkpoint-000030.pt"
    resumed = Trainer(SPEC, manifest, root).run(tmp_path, resume=checkpoint)
    assert resumed.state.t == 40
    assert torch.equal(resumed.state.student.values, full_run.state.student.values)
    assert resumed.state.teacher is not None
    assert full_run.state.teacher is not None
    assert torch.equal(resumed.state.teacher.values, full_run.state.teacher.values)
    assert len(read_telemetry(resumed.telemetry)) == 10


def test_warmup_matches_supervised(
    full_run: RunResult, supervised_run: RunResult
) -> None:
    """Test both modes agree bitwise until the unsupervised weight turns on."""
    name = "checkpoint-000020.pt"
    mean_teacher = load_checkpoint(full_run.checkpoint.parent / name)
    supervised = load_checkpoint(supervised_run.checkpoint.parent / name)
    assert torch.equal(mean_teacher.student.values, supervised.student.values)


def test_supervised_telemetry(supervised_run: RunResult) -> None:
    """Test a supervised only run records no unsupervised losses."""
    for record in read_telemetry(supervised_run.telemetry):
        assert "l_psm" not in record
        assert "l_mgd" not in record
        assert record["lambda"] == 0.0
        assert record["l_total"] == record["l_sup"]


def test_teacher_creation(dataset: Dataset) -> None:
    """Test the teacher starts as an exact copy and then follows the student."""
    root, manifest = dataset
    trainer = Trainer(SPEC, manifest, root)
    state = trainer.initial_state()
    state.t = SPEC.train.teacher_init_iter - 1
    labeled = trainer.scene(manifest.labeled_ids[0])
    trainer.train_step(state, labeled, None)
    assert state.t == SPEC.train.teacher_init_iter
    assert state.teacher is not None
    assert torch.equal(state.teacher.values, state.student.values.detach())
    assert state.telemetry.records[-1].alpha is None
    trainer.train_step(state, labeled, None)
    assert state.telemetry.records[-1].alpha == 0.0
    assert torch.equal(state.teacher.values, state.student.values.detach())


@pytest.mark.parametrize(
    ("ablation", "zeroed"),
    [(Ablation.NO_PSM, "l_psm"), (Ablation.NO_MGD, "l_mgd")],
    ids=["No consistency", "No distillation"],
)
def test_ablation(dataset: Dataset, ablation: Ablation, zeroed: str) -> None:
    """Test an ablated component contributes nothing."""
    root, manifest = dataset
    trainer = Trainer(SPEC, manifest, root, ablation=ablation)
    state = trainer.initial_state()
    state.teacher = state.student.clone()
    state.t = 25
    trainer.train_step(
        state,
        trainer.scene(manifest.labeled_ids[0]),
        trainer.scene(manifest.unlabeled_ids[0]),
    )
    record = state.telemetry.records[-1].model_dump(by_alias=True)
    assert record["lambda"] == 1.0
    assert record[zeroed] == 0.0
    assert record["s_foreground"] is not None


def test_numerical_abort(dataset: Dataset) -> None:
    """Test a non-finite loss stops training before the step."""
    root, manifest = dataset
    trainer = Trainer(SPEC, manifest, root)
    state = trainer.initial_state()
    with torch.no_grad():
        state.student.values.fill_(float("nan"))
    with pytest.raises(NumericalAbortError):
        trainer.train_step(state, trainer.scene(manifest.labeled_ids[0]), None)
    assert state.t == 0


def test_gradient_audit() -> None:
    """Test autograd agrees with finite differences and the teacher is constant."""
    report = gradient_audit(SPEC)
    assert set(report.entries) == {"cls", "reg", "seg", "psm", "mgd"}
    assert report.teacher_gradient_max_abs == 0.0
    assert report.min_coordinates == 20
    for entry in report.entries.values():
        assert entry.coordinates >= 20
        assert entry.max_relative_error <= report.tolerance
    assert report.passed


@pytest.mark.parametrize(
    ("coordinates", "error", "teacher", "passed"),
    [
        (20, 1e-6, 0.0, True),
        (19, 1e-6, 0.0, False),
        (0, 0.0, 0.0, False),
        (20, 1e-3, 0.0, False),
        (20, 1e-6, 1e-9, False),
    ],
    ids=["Pass", "Too few", "No usable gradient", "Too large", "Teacher moved"],
)
def test_audit_report_passed(
    coordinates: int, error: float, teacher: float, passed: bool
) -> None:
    """Test every loss needs enough coordinates within tolerance."""
    report = AuditReport(
        tolerance=1e-4,
        min_coordinates=20,
        entries={
            "cls": AuditEntry(coordinates=25, max_relative_error=0.0),
            "mgd": AuditEntry(coordinates=coordinates, max_relative_error=error),
        },
        teacher_gradient_max_abs=teacher,
    )
    assert report.passed is passed


def test_telemetry_sink(tmp_path: Path) -> None:
    """Test the sink truncates an existing file."""
    path = tmp_path / TELEMETRY_FILE
    path.write_text("stale\n", encoding="utf-8")
    sink = TelemetrySink(path)
    assert not path.read_text(encoding="utf-8")
    assert not sink.records


def test_write_report(tmp_path: Path) -> None:
    """Test the report CSV holds a header and one row."""
    write_report(MetricReport.from_classes(1.0, 0.5, 0.25, None), tmp_path)
    lines = (tmp_path / REPORT_CSV).read_text(encoding="utf-8").splitlines()
    assert lines == [
        "aji_cyto,aji_nuc,aji_avg,map_cyto,map_nuc,map_avg",
        "1.000000,0.500000,0.750000,0.250000,,0.250000",
    ]
