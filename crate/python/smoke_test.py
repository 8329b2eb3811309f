"""Smoke test for the Python bindings.

Either install the module (`pip install maturin && maturin develop -m
crates/python/Cargo.toml`) or build it with

    cargo build --release -p outfit-compat-py --features extension-module

and this script will pick up target/release/liboutfit_compat_py.so.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile


def import_module():
    try:
        import outfit_compat_py

        return outfit_compat_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("liboutfit_compat_py.so", "liboutfit_compat_py.dylib", "outfit_compat_py.dll"):
        lib = root / "target" / "release" / name
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("outfit_compat_py", str(lib))
            spec = importlib.util.spec_from_file_location("outfit_compat_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("outfit_compat_py not found; see the docstring for build steps")


def main():
    oc = import_module()
    with tempfile.TemporaryDirectory() as tmp:
        synth = oc.Dataset.synthetic(seed=1, n_tops=150, n_bottoms=150, n_pairs=600, out_dir=tmp)
        ds = oc.Dataset.load(f"{tmp}/items.jsonl", f"{tmp}/pairs.csv", f"{tmp}/rules.txt", seed=1)
        assert ds.sizes == synth.sizes, (ds.sizes, synth.sizes)
        assert len(ds.rules) == 6
        print(ds)

        model = oc.train(ds, epochs=3, seed=1, last=True)
        assert [h["epoch"] for h in model.history] == [1, 2, 3]
        assert all(math.isfinite(h["train_loss"]) for h in model.history)

        path = f"{tmp}/checkpoint.json"
        model.save(path)
        again = oc.Model.load(path)
        assert again.epoch == model.epoch

        for mode in ("p", "q"):
            report = again.evaluate(ds, mode=mode)
            assert 0.0 <= report["auc"] <= 1.0
            print(f"evaluate {mode}: auc {report['auc']:.4f} over {report['n_triplets']} triplets")
        ret = again.retrieve(ds, split="all", t_candidates=5)
        assert 0.0 < ret["mrr"] <= 1.0
        print(f"retrieve: mrr {ret['mrr']:.4f} over {ret['n_queries']} queries")

        more = again.resume(ds, 1)
        assert more.epoch == 4

        try:
            oc.Model.load(f"{tmp}/missing.json")
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise OSError")
        try:
            again.evaluate(ds, mode="z")
        except ValueError:
            pass
        else:
            raise AssertionError("bad mode should raise ValueError")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
