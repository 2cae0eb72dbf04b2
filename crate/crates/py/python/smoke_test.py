"""Exercise the extension module end to end on a toy model.

Build first, then run with the built library on the path:

    cargo build -p slicelab-py --release
    cp target/release/libslicelab.so /tmp/slicelab.so
    PYTHONPATH=/tmp python3 crates/py/python/smoke_test.py
"""

import math
import random
import tempfile

import slicelab


def main():
    text = "call me ishmael. some years ago, never mind how long precisely. " * 20
    vocab = slicelab.Vocabulary(text)
    ids = vocab.encode(text)
    assert vocab.decode(ids) == text

    cfg = slicelab.ModelConfig(16, 32, 4, 4, 2, 2, len(vocab), 16)
    model = slicelab.Model.init(cfg, 7)
    losses = model.train(ids, steps=60, lr=1e-2, seed=3)
    assert len(losses) == 60 and losses[-1] < losses[0], losses[::10]

    seq = ids[:12]
    logits = model.forward(seq)
    assert len(logits) == 12 and len(logits[0]) == len(vocab)

    rng = random.Random(0)
    calib = [ids[i:i + 16] for i in (rng.randrange(len(ids) - 16) for _ in range(4))]
    same = model.slice(calib, 0.0)
    diff = max(abs(a - b) for ra, rb in zip(logits, same.forward(seq)) for a, b in zip(ra, rb))
    assert diff < 1e-8, diff

    half = model.slice(calib, 0.5, mode="per-block")
    assert half.config.d == 8 and half.sparsity == 0.5
    assert half.parameter_count < model.parameter_count
    print("ppl full %.3f  sliced %.3f" % (model.perplexity(ids[:200]), half.perplexity(ids[:200])))

    with tempfile.TemporaryDirectory() as tmp:
        half.save(tmp)
        back = slicelab.Model.load(tmp)
        assert back.forward(seq) == half.forward(seq)

    try:
        slicelab.validate_sparsity(16, 0.3)
    except ValueError:
        pass
    else:
        raise AssertionError("0.3 of 16 should be rejected")

    assert abs(slicelab.predict_ppl(8.0, 0.5) - 64.0) < 1e-9
    assert abs(slicelab.y_ppl(8.0, 64.0) - 0.5) < 1e-12
    row = slicelab.paper_coefficients("llama3", "arc-e")
    value, over = slicelab.predict_acc(0.8, 0.25, row["a"], row["b"])
    assert abs(value - 0.48766) < 1e-5 and not over
    a, b, rmse = slicelab.fit_line([(0.0, 1.0), (0.5, 0.5), (0.25, 0.75)])
    assert abs(a + 1) < 1e-12 and abs(b - 1) < 1e-12 and rmse < 1e-12

    g = random.Random(1)
    full = [[g.gauss(0, 1) for _ in range(64)] for _ in range(64)]
    kappa = slicelab.kappa_gaussian([x for r in full for x in r])
    assert abs(kappa - 0.5 * math.log2(2 * math.pi * math.e)) < 0.05, kappa
    ratio = slicelab.entropy_ratio([r[:32] for r in full], full)
    assert abs(ratio - 0.5) < 0.05, ratio

    print("smoke test ok")


if __name__ == "__main__":
    main()
