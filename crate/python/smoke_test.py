"""Smoke test for the demoaug extension module.

Build first with `cargo build --release -p demoaug-python`, then run
`python3 python/smoke_test.py` from the repository root.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_demoaug(tmp):
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libdemoaug.so")
        if os.path.exists(lib):
            shutil.copy(lib, os.path.join(tmp, "demoaug.so"))
            sys.path.insert(0, tmp)
            import demoaug

            return demoaug
    sys.exit("libdemoaug.so not found; run `cargo build --release -p demoaug-python`")


def main():
    tmp = tempfile.mkdtemp()
    try:
        da = import_demoaug(tmp)

        env = da.Env("push", seed=3)
        obs = env.reset()
        assert set(obs) == {"observation", "achieved_goal", "desired_goal"}
        obs, reward, success = env.step([0.5, 0.0, 0.0, 0.0])
        assert reward in (-1.0, 0.0) and env.step_count == 1

        a, b = da.affine_params(0.0, 1.0, 2.0, 4.0)
        assert math.isclose(a, 2.0) and math.isclose(b, 2.0)
        assert da.compute_reward([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], "push") == 0.0

        noise = da.OuNoise(seed=1)
        assert len(noise.sample()) == 3 and noise.stationary_std > 0

        demo_path = os.path.join(tmp, "push.json")
        demo = da.record_scripted("push", demo_path)
        demo.validate()
        again = da.Demo.load(demo_path)
        assert again.to_json() == demo.to_json() and len(again) > 0
        assert da.Demo.scripted("stack").segment_count() == 2

        summary = da.generate_demo_set(demo, 5, seed=0)
        assert summary["episodes"] == 5
        assert all(r == 0.0 for r in summary["final_rewards"])

        try:
            da.Env("juggle")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown task accepted")

        cfg = (
            '{"agent": {"epochs": 1, "cycles_per_epoch": 1, "episodes_per_cycle": 1,'
            ' "optimizer_steps_per_cycle": 2, "demo_count": 4, "batch_size": 8, "eval_episodes": 2,'
            ' "hidden_sizes": [8, 8], "buffer_source": "HumanDemo"}}'
        )
        run = os.path.join(tmp, "run")
        rows = da.train(run, config=cfg, task="push", demo=demo_path)
        assert len(rows) == 1, rows
        rate = da.evaluate(os.path.join(run, "checkpoints", "policy.json"), episodes=3)
        assert 0.0 <= rate <= 1.0
        print("smoke test ok")
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    main()
