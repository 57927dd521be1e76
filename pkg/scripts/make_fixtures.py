"""Write the versioned file-format fixtures under tests/fixtures.

Run once per format version and commit the output; the tests read these
files back so that format changes cannot silently break old artifacts.
"""

from pathlib import Path

from freqdiff.denoiser import DenoiserConfig
from freqdiff.phantoms import FORMAT_VERSION, generate_dataset, write_dataset
from freqdiff.schedule import make_schedule
from freqdiff.trainer import CKPT_VERSION, CurriculumSchedule, TrainConfig, TrainState, save_checkpoint, train_step

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(4, 16, seed=11)
    write_dataset(samples, OUT / f"dataset_v{FORMAT_VERSION}.bin", generator_seed=11)

    cfg = DenoiserConfig(depth=1, base_width=4, time_embed_dim=8, convs_per_block=1)
    state = TrainState.create(cfg, make_schedule(10), CurriculumSchedule.default(1.0), TrainConfig(batch_size=4),
                              seed=5, total_steps=2)
    for _ in range(2):
        train_step(state, samples)
    save_checkpoint(state, OUT / f"checkpoint_v{CKPT_VERSION}.ckpt")
    print(f"fixtures written to {OUT}")


if __name__ == "__main__":
    main()
