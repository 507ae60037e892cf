from __future__ import annotations

import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from naclab.errors import ConfigurationError
from naclab.harness import experiments
from naclab.harness.cli import _seed_list, main
from naclab.harness.experiments import (
    EXIT_ASSUMPTION,
    EXIT_EXPECTED_DIVERGENCE,
    EXIT_OK,
    EXIT_VALIDATION,
    csv_text,
    mean_stderr,
    parse_spec,
    run_experiment,
    run_sweep,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _body(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def _critic_doc(**kw):
    doc = {
        "kind": "critic-convergence",
        "instance": "gallery:tabular-2x2",
        "seeds": [0],
        "critic": {"n": "min", "num_iters": 1000, "schedule": {"kind": "constant", "alpha": 0.05}},
    }
    doc.update(kw)
    return doc


# spec validation


def test_empty_seed_list_is_rejected_and_writes_nothing(tmp_path):
    with pytest.raises(ConfigurationError, match="seed"):
        parse_spec(_critic_doc(seeds=[]))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(_critic_doc(seeds=[])))
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_VALIDATION
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"kind": "nope"}, "kind"),
        ({"seeds": [1, 1]}, "duplicate"),
        ({"instance": "missing.json"}, "does not exist"),
        ({"instance": "gallery:unknown"}, "unknown gallery"),
        ({"surprise": 1}, "surprise"),
        ({"critic": {"n": 0}}, "critic.n"),
        ({"thin": 0}, "thin"),
    ],
)
def test_invalid_specs(patch, message):
    with pytest.raises(ConfigurationError, match=message):
        parse_spec(_critic_doc(**patch))


def test_inline_instance_is_accepted():
    inst = json.loads((CONFIGS.parent / "src/naclab/harness/gallery.json").read_text())["tabular-2x2"]["instance"]
    spec = parse_spec(_critic_doc(instance=inst))
    assert spec.instance.mdp.num_states == 2


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_validate(path, capsys):
    assert main(["validate", str(path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok:")


# run_experiment


def test_critic_convergence_smoke(tmp_path):
    outcome = run_experiment(parse_spec(_critic_doc(thin=10)), out=str(tmp_path))
    assert outcome.status == EXIT_OK
    rows = _body(outcome.files["seed_0.csv"])
    # k = 0 plus one row every ``thin`` iterations.
    assert len(rows) == 1 + 1000 // 10
    mse = np.array([float(r["mse"]) for r in rows])
    assert np.all(np.isfinite(mse))
    assert mse[-10:].mean() < mse[:10].mean()
    assert mse[-1] < mse[0]
    manifest = json.loads(outcome.files["manifest.json"])
    for key in ("t_alpha", "lambda_min", "n_min", "zeta_pi"):
        assert key in manifest["constants"]
    assert (outcome.out_dir / "aggregate.csv").exists()


def test_csv_header_lines(tmp_path):
    outcome = run_experiment(parse_spec(_critic_doc()), out=str(tmp_path))
    head = outcome.files["seed_0.csv"].splitlines()[:4]
    assert head[0].startswith("# config {") and head[1] == "# seed 0"
    assert head[2] == f"# mdp_hash {parse_spec(_critic_doc()).instance.content_hash()}"
    assert head[3].startswith("k,mse")


def test_runs_are_byte_identical(tmp_path):
    doc = _critic_doc(seeds=[0, 1], thin=50)
    a = run_experiment(parse_spec(doc), out=str(tmp_path / "a"))
    b = run_experiment(parse_spec(doc), out=str(tmp_path / "b"), workers=2)
    for name in a.files:
        if name.endswith(".csv"):
            assert a.files[name] == b.files[name]
            assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()


def test_bound_columns_present_only_when_gate_holds(tmp_path):
    small = _critic_doc(critic={"n": "min", "num_iters": 200, "schedule": {"kind": "constant", "alpha": "compliant"}})
    ok = run_experiment(parse_spec(small), out=str(tmp_path))
    assert "bound_E1" in ok.files["seed_0.csv"].splitlines()[3]
    big = run_experiment(parse_spec(_critic_doc()), out=str(tmp_path))
    header = big.files["seed_0.csv"].splitlines()[3]
    assert header == "k,mse" and "nan" not in big.files["seed_0.csv"].lower()
    assert "omitted" in big.manifest["bound_status"]


def test_deadly_triad_run(tmp_path):
    spec = parse_spec({"kind": "deadly-triad", "instance": "gallery:deadly-triad", "seeds": [0, 1]})
    outcome = run_experiment(spec, out=str(tmp_path))
    assert outcome.status == EXIT_EXPECTED_DIVERGENCE
    n1 = _body(outcome.files["deadly_n1.csv"])
    nmin = _body(outcome.files["deadly_nmin.csv"])
    assert all(r["diverged"] == "1" for r in n1)
    assert all(r["diverged"] == "0" for r in nmin)
    assert all(float(r["final_error"]) < 1e-2 for r in nmin)
    cert = json.loads(outcome.files["certification.json"])
    assert cert["contraction_n1"] > 1 and cert["contraction_nmin"] <= 0.5


def test_cli_deadly_triad_exit_code(tmp_path):
    code = main(["run", str(CONFIGS / "deadly_triad.json"), "--seeds", "0", "--out", str(tmp_path)])
    assert code == EXIT_EXPECTED_DIVERGENCE


def test_assumption_failure_exit_code(tmp_path, capsys):
    # Requesting the actor bound with a horizon below the contraction horizon is a precondition failure.
    doc = {
        "kind": "bound-table",
        "instance": "gallery:deadly-triad",
        "seeds": [0],
        "critic": {"n": 1, "schedule": {"kind": "constant", "alpha": 0.01}, "num_iters": 100},
        "bound_ks": [100],
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc))
    code = main(["run", str(path), "--out", str(tmp_path / "out")])
    assert code == EXIT_ASSUMPTION
    assert "horizon" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_nac_gap_run_on_tabular_has_zero_a2(tmp_path):
    doc = json.loads((CONFIGS / "nac_gap.json").read_text())
    doc["seeds"] = [0, 1]
    outcome = run_experiment(parse_spec(doc), out=str(tmp_path))
    rows = _body(outcome.files["seed_0.csv"])
    if "A2" in rows[0]:
        assert all(float(r["A2"]) == 0.0 for r in rows if r["A2"])
    assert all(float(r["gap"]) >= 0 for r in rows)


@pytest.mark.parametrize("name", ["npg_exact.json", "qnpg.json", "bound_table.json", "stepsize_sweep.json"])
def test_other_kinds_run(name, tmp_path):
    doc = json.loads((CONFIGS / name).read_text())
    doc["seeds"] = doc["seeds"][:2]
    outcome = run_experiment(parse_spec(doc), out=str(tmp_path))
    assert outcome.status == EXIT_OK
    assert any(n.endswith(".csv") for n in outcome.files)


# CSV helpers


def test_csv_text_uses_repr_and_blank_for_missing():
    text = csv_text(["a", "b", "c"], [[0.1, None, True]], ["note"])
    assert text == "# note\na,b,c\n0.1,,1\n"


def test_mean_stderr():
    m, se = mean_stderr([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1 / np.sqrt(3))
    assert mean_stderr([4.0]) == (4.0, 0.0)


# CLI


def test_seed_list_parser():
    assert _seed_list("0-3,7, 9") == [0, 1, 2, 3, 7, 9]
    assert _seed_list("5") == [5]


def test_cli_bad_seed_syntax(tmp_path):
    assert main(["validate", str(CONFIGS / "critic_convergence.json"), "--seeds", "a-b"]) == EXIT_VALIDATION


def test_cli_gallery(capsys):
    assert main(["gallery", "list"]) == EXIT_OK
    assert "deadly-triad" in capsys.readouterr().out
    assert main(["gallery", "certify", "tabular-4x2"]) == EXIT_OK
    assert main(["gallery", "certify", "nope"]) == EXIT_VALIDATION


def test_cli_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "naclab", "validate", str(CONFIGS / "deadly_triad.json")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("NACLAB_OUT", str(tmp_path))
    assert experiments.output_root() == tmp_path
    assert experiments.output_root("elsewhere") == Path("elsewhere")


# sweep


def _sweep_doc(epsilons, seeds=(0, 1, 2)):
    doc = json.loads((CONFIGS / "sweep.json").read_text())
    doc["seeds"] = list(seeds)
    doc["sweep"]["epsilons"] = epsilons
    return doc


def test_sweep_trivial_epsilon_takes_smallest_grid_point():
    spec = parse_spec(_sweep_doc([10.0]))
    rows, slope = experiments.sample_complexity_sweep(spec)
    assert rows[0].T == spec.sweep["T_grid"][0] and rows[0].K == spec.sweep["K_grid"][0]
    assert slope is None


def test_sweep_marks_unreachable_and_continues():
    doc = _sweep_doc([10.0, 1e-9])
    doc["sweep"]["T_grid"] = [2, 4]
    doc["sweep"]["K_grid"] = [16, 32]
    rows, _ = experiments.sample_complexity_sweep(parse_spec(doc))
    assert rows[0].reachable and not rows[1].reachable and rows[1].total_samples is None


def test_sweep_counts_are_monotone(tmp_path):
    doc = _sweep_doc([0.4, 0.2])
    outcome = run_sweep(parse_spec(doc), out=str(tmp_path))
    rows = _body(outcome.files["sweep.csv"])
    totals = [int(r["total_samples"]) for r in rows]
    assert totals == sorted(totals)
    assert all(float(r["A2"]) == 0.0 for r in rows)


def test_sweep_requires_nac_gap_kind():
    with pytest.raises(ConfigurationError):
        run_sweep(parse_spec(_critic_doc()))
