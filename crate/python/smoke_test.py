"""Smoke test for the ragmds_native extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/ragmds_native-*.whl

The generation check needs the `ragmds` binary (cargo build -p ragmds-cli);
it is skipped when the binary cannot be found.
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

import ragmds_native as rn

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def check_vocab(tmp):
    vocab = rn.Vocabulary.build(["the cat sat", "the dog ran"], max_size=100)
    ids = vocab.encode("the cat")
    assert vocab.decode(ids) == "the cat", vocab.decode(ids)
    path = os.path.join(tmp, "vocab.txt")
    vocab.save(path)
    again = rn.Vocabulary.load(path)
    assert len(again) == len(vocab)
    assert again.id_of("cat") == vocab.id_of("cat")


def check_rouge():
    s = rn.rouge("the cat sat", "the cat")
    assert abs(s["r1"] - 0.8) < 1e-12, s
    assert rn.rouge("a c b d", "a b c d")["rl"] == 0.75


def check_schedule():
    assert rn.lr_schedule(0, 3e-5, 2000, 12000) == 0.0
    assert rn.lr_schedule(2000, 3e-5, 2000, 12000) == 3e-5
    assert rn.lr_schedule(12000, 3e-5, 2000, 12000) == 0.0


def check_index(tmp):
    vectors = []
    for i in range(8):
        angle = i * math.pi / 8
        vectors.append([math.cos(angle), math.sin(angle)])
    index = rn.MemoryIndex([f"doc{i}" for i in range(8)], vectors)
    hits = index.search([1.0, 0.0], 3)
    assert [h[0] for h in hits] == [0, 1, 2], hits
    assert index.key(hits[0][0]) == "doc0"
    index.train_quantizer(2, iters=5)
    assert index.search([1.0, 0.0], 3, n_probe=2) == hits
    path = os.path.join(tmp, "index.bin")
    index.save(path)
    assert len(rn.MemoryIndex.load(path)) == 8
    try:
        index.search([1.0, 0.0, 0.0], 1)
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")


def find_cli():
    for profile in ("release", "debug"):
        path = os.path.join(ROOT, "target", profile, "ragmds")
        if os.path.exists(path):
            return path
    return shutil.which("ragmds")


def check_generator(tmp):
    cli = find_cli()
    if cli is None:
        print("skip: ragmds binary not found")
        return
    data = os.path.join(tmp, "data.jsonl")
    with open(data, "w") as f:
        for i in range(6):
            f.write(json.dumps({
                "id": f"p{i}",
                "abstract": f"we study problem q{i % 3}",
                "ref_abstracts": [f"tool t{i % 2} solves q{i % 3}"],
                "related_work": f"t{i % 2} was applied to q{i % 3}",
            }) + "\n")
    config = os.path.join(tmp, "config.json")
    with open(config, "w") as f:
        json.dump({
            "batch_size": 2, "warmup_steps": 1, "total_steps": 2, "top_k": 1,
            "model": {"d_model": 16, "heads": 2, "layers": 1, "max_len": 32, "max_target_len": 16},
            "decode": {"beam": 2, "max_len": 6, "min_len": 1},
        }, f)
    out = os.path.join(tmp, "ckpt")
    subprocess.run([cli, "--config", config, "train", "--skip-pretrain",
                    "--data", data, "--output", out], check=True)
    gen = rn.Generator(out, index=os.path.join(out, "index.bin"))
    text = gen.generate("we study problem q1", ["tool t1 solves q1"])
    assert isinstance(text, str)
    assert len(text.split()) <= 6


def main():
    with tempfile.TemporaryDirectory() as tmp:
        check_vocab(tmp)
        check_rouge()
        check_schedule()
        check_index(tmp)
        check_generator(tmp)
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
