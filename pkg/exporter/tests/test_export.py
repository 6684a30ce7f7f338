"""Export semantics: scaling, fidelity, skip reporting, and hard failures."""

import json

import numpy as np
import pytest

from lagexport.checkpoint import ExportError, load_tensor, scan_checkpoints
from lagexport.cli import main
from lagexport.export import ExportSpec, export
from lagexport.rules import load_rules
from lagexport.store_writer import RawEntry, write_raw_store
from helpers import (
    DEFAULT_RULES,
    adapter_pair,
    read_blob,
    tensor_name,
    write_bf16_checkpoint,
    write_checkpoint,
    write_rules,
)


def make_spec(tmp_path, tensors, *, alpha=None, rules=DEFAULT_RULES, tag="task"):
    ckpt = write_checkpoint(tmp_path / "ckpt.safetensors", tensors)
    parsed = load_rules(write_rules(tmp_path / "rules.json", rules))
    return ExportSpec(inputs=(ckpt,), rules=parsed, tag=tag, alpha=alpha)


def test_export_scales_b_by_alpha_over_r(tmp_path):
    rng = np.random.default_rng(0)
    A, B = adapter_pair(rng, 16, 16, 8)
    spec = make_spec(
        tmp_path,
        {tensor_name("q_proj", "A"): A, tensor_name("q_proj", "B"): B},
        alpha=16.0,
    )
    out = tmp_path / "store"
    manifest_path, report = export(spec, out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert manifest["aligned"] is False
    assert manifest["library_tag"] == "task"
    (entry,) = manifest["entries"]
    assert entry["id"] == "q_proj@attn.0"
    assert (entry["m"], entry["n"], entry["r"]) == (16, 16, 8)
    stored_a = read_blob(out, entry["blobs"]["A"], 8, 16)
    stored_b = read_blob(out, entry["blobs"]["B"], 16, 8)
    assert stored_a.tobytes() == A.tobytes()
    assert np.array_equal(stored_b, B * np.float32(2.0))
    assert report.exported[0].scale == 2.0
    assert (out / "export_report.json").exists()


def test_export_without_alpha_is_bitwise_passthrough(tmp_path):
    rng = np.random.default_rng(1)
    A, B = adapter_pair(rng, 6, 10, 2)
    spec = make_spec(tmp_path, {tensor_name("v_proj", "A"): A, tensor_name("v_proj", "B"): B})
    out = tmp_path / "store"
    export(spec, out)
    entry = json.loads((out / "manifest.json").read_text())["entries"][0]
    assert read_blob(out, entry["blobs"]["A"], 2, 10).tobytes() == A.tobytes()
    assert read_blob(out, entry["blobs"]["B"], 6, 2).tobytes() == B.tobytes()


def test_half_precision_sources_widen_exactly(tmp_path):
    rng = np.random.default_rng(2)
    A, B = adapter_pair(rng, 4, 8, 2, dtype=np.float16)
    spec = make_spec(tmp_path, {tensor_name("k_proj", "A"): A, tensor_name("k_proj", "B"): B})
    out = tmp_path / "store"
    export(spec, out)
    entry = json.loads((out / "manifest.json").read_text())["entries"][0]
    assert read_blob(out, entry["blobs"]["A"], 2, 8).tobytes() == A.astype(np.float32).tobytes()
    assert read_blob(out, entry["blobs"]["B"], 4, 2).tobytes() == B.astype(np.float32).tobytes()


def test_per_adapter_rank_drives_the_scale(tmp_path):
    rng = np.random.default_rng(3)
    A1, B1 = adapter_pair(rng, 8, 8, 8)
    A2, B2 = adapter_pair(rng, 8, 8, 4)
    spec = make_spec(
        tmp_path,
        {
            tensor_name("q_proj", "A"): A1,
            tensor_name("q_proj", "B"): B1,
            tensor_name("v_proj", "A"): A2,
            tensor_name("v_proj", "B"): B2,
        },
        alpha=16.0,
    )
    _, report = export(spec, tmp_path / "store")
    scales = {a.id: a.scale for a in report.exported}
    assert scales == {"q_proj@attn.0": 2.0, "v_proj@attn.0": 4.0}


def test_unmatched_and_unsupported_tensors_are_skipped(tmp_path):
    rng = np.random.default_rng(4)
    A, B = adapter_pair(rng, 4, 4, 2)
    good = write_checkpoint(
        tmp_path / "good.safetensors",
        {
            tensor_name("q_proj", "A"): A,
            tensor_name("q_proj", "B"): B,
            "model.norm.weight": rng.standard_normal(4).astype(np.float32),
        },
    )
    halfed = write_bf16_checkpoint(
        tmp_path / "bf16.safetensors",
        [tensor_name("z_proj", "A", idx=9), tensor_name("z_proj", "B", idx=9)],
    )
    rules = load_rules(write_rules(tmp_path / "rules.json"))
    spec = ExportSpec(inputs=(good, halfed), rules=rules, tag="task")
    out = tmp_path / "store"
    _, report = export(spec, out)
    assert [a.id for a in report.exported] == ["q_proj@attn.0"]
    reasons = {s["tensor"]: s["reason"] for s in report.skipped}
    assert reasons["model.norm.weight"] == "no rule matches"
    assert reasons[tensor_name("z_proj", "A", idx=9)] == "unsupported dtype BF16"
    assert reasons[tensor_name("z_proj", "B", idx=9)] == "unsupported dtype BF16"
    on_disk = json.loads((out / "export_report.json").read_text())
    assert len(on_disk["skipped"]) == 3


def test_empty_checkpoint_exports_a_valid_empty_library(tmp_path):
    spec = make_spec(tmp_path, {})
    out = tmp_path / "store"
    manifest_path, report = export(spec, out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["entries"] == []
    assert manifest["library_tag"] == "task" and manifest["aligned"] is False
    assert report.exported == [] and report.skipped == []


def test_reruns_are_byte_identical(tmp_path):
    rng = np.random.default_rng(5)
    A, B = adapter_pair(rng, 4, 4, 2)
    tensors = {tensor_name("q_proj", "A"): A, tensor_name("q_proj", "B"): B}
    spec = make_spec(tmp_path, tensors, alpha=4.0)
    export(spec, tmp_path / "one")
    export(spec, tmp_path / "two")
    for name in ("manifest.json", "export_report.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_missing_counterpart_is_a_hard_error(tmp_path):
    rng = np.random.default_rng(6)
    A, _ = adapter_pair(rng, 4, 4, 2)
    spec = make_spec(tmp_path, {tensor_name("q_proj", "A"): A})
    with pytest.raises(ExportError, match="no role-B"):
        export(spec, tmp_path / "store")


def test_shape_conflict_is_a_hard_error(tmp_path):
    rng = np.random.default_rng(7)
    A = rng.standard_normal((4, 8)).astype(np.float32)
    B = rng.standard_normal((8, 3)).astype(np.float32)
    spec = make_spec(tmp_path, {tensor_name("q_proj", "A"): A, tensor_name("q_proj", "B"): B})
    with pytest.raises(ExportError, match="shape conflict"):
        export(spec, tmp_path / "store")


def test_colliding_slots_are_a_hard_error(tmp_path):
    rng = np.random.default_rng(8)
    A, B = adapter_pair(rng, 4, 4, 2)
    rules = DEFAULT_RULES + [
        {
            "pattern": r"extra\.tensor",
            "role": "A",
            "adapter": "q_proj",
            "layer": "attn.0",
        }
    ]
    spec = make_spec(
        tmp_path,
        {
            tensor_name("q_proj", "A"): A,
            tensor_name("q_proj", "B"): B,
            "extra.tensor": A,
        },
        rules=rules,
    )
    with pytest.raises(ExportError, match="both map to"):
        export(spec, tmp_path / "store")


def test_duplicate_tensor_names_across_files_are_a_hard_error(tmp_path):
    rng = np.random.default_rng(9)
    A, B = adapter_pair(rng, 4, 4, 2)
    one = write_checkpoint(tmp_path / "one.safetensors", {tensor_name("q_proj", "A"): A})
    two = write_checkpoint(tmp_path / "two.safetensors", {tensor_name("q_proj", "A"): B.T})
    with pytest.raises(ExportError, match="appears in both"):
        scan_checkpoints([one, two])


def test_non_finite_values_are_a_hard_error(tmp_path):
    rng = np.random.default_rng(10)
    A, B = adapter_pair(rng, 4, 4, 2)
    A[0, 0] = np.inf
    spec = make_spec(tmp_path, {tensor_name("q_proj", "A"): A, tensor_name("q_proj", "B"): B})
    with pytest.raises(ExportError, match="non-finite"):
        export(spec, tmp_path / "store")


def test_spec_validation():
    with pytest.raises(ExportError, match="checkpoint path"):
        ExportSpec(inputs=(), rules=(object(),), tag="task")
    with pytest.raises(ExportError, match="naming rule"):
        ExportSpec(inputs=("x",), rules=(), tag="task")
    with pytest.raises(ExportError, match="tag"):
        ExportSpec(inputs=("x",), rules=(object(),), tag="prompt")
    with pytest.raises(ExportError, match="alpha"):
        ExportSpec(inputs=("x",), rules=(object(),), tag="task", alpha=0.0)


def test_scan_missing_checkpoint_wraps_oserror(tmp_path):
    with pytest.raises(ExportError) as err:
        scan_checkpoints([str(tmp_path / "missing.safetensors")])
    assert isinstance(err.value.__cause__, OSError)


def test_load_tensor_refuses_unsupported(tmp_path):
    path = write_bf16_checkpoint(tmp_path / "bf16.safetensors", ["only.weight"])
    (info,) = scan_checkpoints([path])
    assert not info.supported
    with pytest.raises(ExportError, match="unsupported dtype"):
        load_tensor(info)


def test_store_writer_rejects_duplicates_and_bad_tags(tmp_path):
    rng = np.random.default_rng(11)
    A, B = adapter_pair(rng, 4, 4, 2)
    entry = RawEntry(id="same", layer="attn.0", A=A, B=B)
    with pytest.raises(ExportError, match="duplicate"):
        write_raw_store(tmp_path / "dup", "task", [entry, entry])
    with pytest.raises(ExportError, match="tag"):
        write_raw_store(tmp_path / "tag", "prompt", [entry])
    with pytest.raises(ExportError, match="incompatible"):
        RawEntry(id="bad", layer="attn.0", A=A, B=B[:, :1])


def test_hostile_ids_get_safe_blob_names(tmp_path):
    rng = np.random.default_rng(12)
    A, B = adapter_pair(rng, 4, 4, 2)
    entries = [
        RawEntry(id="weird/chars here", layer="l", A=A, B=B),
        RawEntry(id="weird_chars_here", layer="l", A=A, B=B),
    ]
    write_raw_store(tmp_path, "task", entries)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    paths = [e["blobs"]["A"] for e in manifest["entries"]]
    assert len(set(paths)) == 2
    for rel in paths:
        assert (tmp_path / rel).exists()
        assert " " not in rel and ":" not in rel


def test_cli_export_and_exit_codes(tmp_path, capsys):
    rng = np.random.default_rng(13)
    A, B = adapter_pair(rng, 4, 4, 2)
    ckpt = write_checkpoint(
        tmp_path / "ckpt.safetensors",
        {tensor_name("q_proj", "A"): A, tensor_name("q_proj", "B"): B},
    )
    rules = write_rules(tmp_path / "rules.json")
    out = tmp_path / "store"
    code = main(
        ["export", "--input", ckpt, "--pattern", rules, "--alpha", "4", "--tag", "task",
         "--out", str(out)]
    )
    assert code == 0
    assert "exported 1 adapters" in capsys.readouterr().out
    assert (out / "manifest.json").exists()

    code = main(
        ["export", "--input", str(tmp_path / "nope.safetensors"), "--pattern", rules,
         "--tag", "task", "--out", str(out)]
    )
    assert code == 2
    bad_rules = tmp_path / "bad.json"
    bad_rules.write_text("{}")
    code = main(["export", "--input", ckpt, "--pattern", str(bad_rules), "--tag", "task",
                 "--out", str(out)])
    assert code == 1
    with pytest.raises(SystemExit) as err:
        main(["export", "--input", ckpt, "--pattern", rules, "--tag", "prompt", "--out", "x"])
    assert err.value.code == 1
