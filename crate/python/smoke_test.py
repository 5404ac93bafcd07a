"""Smoke test for the wealy extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile

import wealy


def main():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = wealy.synth(tmp, n_cliques=40, seed=3)
        assert len(manifest) > 80, manifest
        assert not [i for i in manifest.validate() if i[0] == "error"]
        test_ids = manifest.track_ids("test")

        oracle = wealy.baseline("oracle", manifest, "test")
        assert oracle.shape == (len(test_ids), len(test_ids))
        m, _, n = wealy.evaluate(oracle, manifest)
        assert abs(m - 1.0) < 1e-12 and n > 0, m

        rand = wealy.baseline("random", manifest, "test", seed=1)
        tfidf = wealy.baseline("tfidf", manifest, "test")
        assert wealy.evaluate(rand, manifest)[0] < wealy.evaluate(tfidf, manifest)[0]

        same = wealy.fuse(tfidf, rand, alpha=0.0)
        assert same.values() == tfidf.values()
        path = f"{tmp}/tfidf.wdst"
        tfidf.save(path)
        assert wealy.DistanceMatrix.load(path).values() == tfidf.values()

        config = {
            "max_epochs": 2,
            "warmup_epochs": 1,
            "batch_size": 16,
            "k": 32,
            "encoder": {"d_in": manifest.d, "d_h": 16, "n_blocks": 1, "n_heads": 2, "d_ffn": 32, "d_e": 8},
        }
        summary = wealy.train_encoder(json.dumps(config), manifest, f"{tmp}/run")
        assert len(summary["val_map"]) == 2
        dm = wealy.embed(summary["checkpoint"], manifest, "test", k=32, overlap=0.5)
        assert 0.0 <= wealy.evaluate(dm, manifest)[0] <= 1.0

    assert wealy.oracle_check("[Instrumental]")[0] is False
    assert wealy.gem([[1.0, 2.0], [3.0, 4.0]], p=1.0) == [2.0, 3.0]
    loss = wealy.ntxent([[1.0, 0.0], [1.0, 0.0]])
    assert abs(loss) < 1e-12, loss
    assert math.isfinite(wealy.ntxent([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]]))
    print("smoke test ok")


if __name__ == "__main__":
    main()
