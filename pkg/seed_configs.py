import os
import sys

from dotenv import load_dotenv
load_dotenv()

from src.config import ScenarioConfig, dump_config
from src.device import params_at, v_opt

# Writes fully-defaulted scenario files; edit the copies, not this script.


def main(target_dir: str = "configs") -> None:
    print(f"Seeding scenario files into {target_dir}...")
    os.makedirs(target_dir, exist_ok=True)

    base = ScenarioConfig()
    hot_opt = v_opt(params_at(base.device, 125.0))
    rt_opt = v_opt(params_at(base.device, 25.0))

    scenarios = {
        "nominal.full.json": base.model_copy(update={"output_dir": "out/nominal"}),
        "drift.full.json": base.model_copy(update={"output_dir": "out/drift"}),
        "ber.full.json": base.model_copy(update={
            "output_dir": "out/ber",
            "ber": base.ber.model_copy(update={"fixed_v_read": [rt_opt, hot_opt]}),
        }),
    }
    for name, cfg in scenarios.items():
        path = os.path.join(target_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(dump_config(cfg))
        print(f" - {path}")
    print("Done.")


if __name__ == "__main__":
    main(*sys.argv[1:])
