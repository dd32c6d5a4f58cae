"""Smoke test for the perfnas_py extension.

Build first:  pip install --no-build-isolation -e crates/python
Then run:     python python/smoke_test.py
"""

import json
import pathlib
import tempfile

import perfnas_py as pn

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_cost():
    seed = pn.seed_arch()
    cost = pn.network_cost(seed)
    assert cost["total_ops"] == 613_184_000, cost["total_ops"]
    assert cost["total_params"] == 454_000
    assert pn.mflops(cost["total_ops"]) == "613.18"
    tiny = {"input": {"c": 1, "h": 1, "w": 1}, "layers": [{"kh": 1, "kw": 1, "m": 1}]}
    assert pn.network_cost(tiny)["total_ops"] == 3


def check_compare_and_pareto():
    assert pn.compare(613.18e6, 18.17e6, 0.9596, 0.9583) == (33.75, -0.13)
    ids = pn.frontier([(1, 0.95, 100), (2, 0.93, 50), (3, 0.90, 80), (4, 0.80, 10)])
    assert ids == [1, 2, 4], ids
    assert pn.dominates((0.95, 10), (0.90, 20))
    assert not pn.dominates((0.95, 10), (0.95, 10))
    try:
        pn.compare(0, 1, 0.9, 0.9)
    except ValueError:
        pass
    else:
        raise AssertionError("zero cost accepted")


def check_space_and_sampler():
    space = pn.SearchSpace.reference()
    assert "0:kh" in space.params()
    frozen = space.freeze("0:kh", 2)
    assert frozen.frozen() == ["0:kh"]
    assert frozen.size() * 4 == space.size()
    assert pn.SearchSpace.from_json(space.to_json()).size() == space.size()

    tpe = pn.TpeSampler(seed=3, n_startup=5)
    for i in range(12):
        a = tpe.suggest(frozen)
        assert a["0:kh"] == 2
        frozen.apply(a)
        tpe.observe(frozen, a, (i % 4) / 4)
    assert tpe.n_observations == 12
    assert tpe.density_ratio(frozen, tpe.suggest(frozen)) > 0


def check_surrogate():
    request = {
        "trial_id": 7,
        "arch": pn.seed_arch(),
        "solver": {"optimizer": "adam", "lr": 1e-3, "batch": 25, "iterations": 8000, "decay": None},
        "eval_samples": 100,
        "seed": 1,
    }
    first = pn.surrogate_eval(request)
    assert first == pn.surrogate_eval(request)
    assert first[0] == 7 and 0.0 <= first[1] <= 1.0 and first[2] == 100


def check_run():
    config = ROOT / "configs" / "desk.json"
    with tempfile.TemporaryDirectory() as tmp:
        log_path = pathlib.Path(tmp) / "trials.jsonl"
        text = pn.run_experiment(str(config), str(log_path))
        assert log_path.read_text() == text
    assert text == pn.run_experiment(str(config))
    n, frontier = pn.summarize_log(text)
    assert n == 160, n
    assert frontier
    events = [json.loads(line)["event"] for line in text.splitlines()]
    assert events.count("proposed") == 160


if __name__ == "__main__":
    for check in (check_cost, check_compare_and_pareto, check_space_and_sampler, check_surrogate, check_run):
        check()
        print(f"ok  {check.__name__}")
