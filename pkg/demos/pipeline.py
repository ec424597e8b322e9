"""Walk through the whole pipeline on a synthetic corpus.

Plants lane changes in a 5-lane highway corpus, mines them, calibrates risk
thresholds on the logged motion, trains a small adversary for a few
iterations, generates episodes and scores them across SVO angles.

    python demos/pipeline.py [workdir]
"""
import json
import sys
import tempfile
from pathlib import Path

from lcgen.cli import main
from lcgen.ingest import save_lane_map
from lcgen.synthetic import planted_corpus, write_corpus_csv

TRAIN = {"batch_ppo": 256, "n_envs": 16, "batch_gail": 256, "minibatch": 128, "embed_dim": 8,
         "hidden": [16, 16], "disc_pretrain_steps": 5, "w_chunks": 2, "replay_capacity": 5000,
         "iterations": 20}


def run(*argv):
    print("$ lcgen " + " ".join(argv))
    rc = main(list(argv))
    if rc:
        sys.exit(rc)
    print()


def demo(work: Path):
    trajs, lanes, truth = planted_corpus(50, 30, seed=0)
    write_corpus_csv(work / "traj.csv", trajs)
    save_lane_map(work / "lanes.json", lanes)
    (work / "train.json").write_text(json.dumps(TRAIN))
    print(f"planted {len(truth)} lane changes, {sum(p.passes for p in truth)} of them clean\n")

    cat = str(work / "mine" / "catalog.jsonl")
    ckpt = str(work / "train" / "checkpoint.lcgen")
    run("mine", str(work / "traj.csv"), str(work / "lanes.json"), "--out", str(work / "mine"))
    run("calibrate", cat, "--out", str(work / "cal"))
    run("train", cat, "--config", str(work / "train.json"), "--out", str(work / "train"))
    run("generate", ckpt, cat, "--n-episodes", "10", "--out", str(work / "gen"))
    run("evaluate", "--traces", str(work / "gen"), "--thresholds", str(work / "cal" / "thresholds.json"),
        "--checkpoint", ckpt, "--catalog", cat, "--out", str(work / "eval"))
    run("plot", str(work / "train" / "metrics.csv"), str(work / "gen" / "episode_000.csv"),
        "--out", str(work / "plots"))
    print(f"outputs under {work}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        target = Path(sys.argv[1])
        target.mkdir(parents=True, exist_ok=True)
        demo(target)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            demo(Path(tmp))
