"""Smoke test for the tweetaffect extension module.

Build and install first:  maturin build -m crates/python/Cargo.toml -o dist && pip install dist/*.whl
"""
import math
import os
import tempfile

import tweetaffect as ta


def main():
    assert ta.tokenize("Loving it!! @bob http://x.co #Joy") == ["loving", "it", "!", "!", "<user>", "<url>", "joy"]
    assert ta.pearson([1, 2, 3], [1, 3, 2]) == 0.5
    assert abs(ta.jaccard([[True, True, False]], [[True, False, True]]) - 1 / 3) < 1e-15
    assert ta.class_weights([0, 0, 0, 1], 2) == [4 / 6, 2.0]
    assert ta.bias_eval([0.2, 0.4], [0.2, 0.4]) == (0.0, 1.0)

    emb = ta.Embeddings.synthetic(8, 1)
    assert emb.dim == 8 and len(emb) == len(emb.words())
    model = ta.Model(emb, "regression", seed=3)
    with tempfile.TemporaryDirectory() as d:
        train, dev = os.path.join(d, "train.tsv"), os.path.join(d, "dev.tsv")
        ta.write_synth_dataset("V-reg", 40, 1, train)
        ta.write_synth_dataset("V-reg", 20, 2, dev)
        losses = model.fit("V-reg", train, dev, max_epochs=3, lr=0.01, seed=1)
        assert len(losses) == 3 and all(math.isfinite(l) for l in losses)
        metric, value = model.evaluate("V-reg", dev)
        assert metric == "pearson" and -1 <= value <= 1

        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = ta.Model.load(path)
        assert again.predict("p1 n2 u3") == model.predict("p1 n2 u3")

        frozen = again.transfer("ordinal 7", "tl-fr", seed=4)
        assert frozen.head == "ordinal 7" and abs(sum(frozen.predict("p1")) - 1) < 1e-12

        pairs = model.attention("p1 unseenword n2")
        assert [t for t, _ in pairs] == ["p1", "unseenword", "n2"]
        assert abs(sum(w for _, w in pairs) - 1) < 1e-12
        html = ta.render_heatmap([t for t, _ in pairs], [w for _, w in pairs], "html")
        assert html.count(b"<span") == 3

        assert ta.run_cli(["gradcheck", "--config", "small"]) == 0
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
