from pathlib import Path

from cortolam.config import PipelineConfig, SynthConfig, TrainConfig
from cortolam.console import setup_logger
from cortolam.pipeline import Pipeline

REPO_ROOT = Path(__file__).parent.parent
path_in_repo = REPO_ROOT.joinpath

# Enable logging to stderr
setup_logger()

# Configure a small synthetic section and a short boosting run
config = PipelineConfig(
    workdir=path_in_repo("debug_run"),
    seed=7,
    synth=SynthConfig(width_um=1200, height_um=2800),
    train=TrainConfig(rounds=50, jobs=4),
)

# Run the whole pipeline
pipeline = Pipeline(config)
pipeline.synth()
pipeline.features()
pipeline.regions()
pipeline.train()
pipeline.predict()
pipeline.explain()
pipeline.evaluate()
pipeline.plot(
    [config.path("truth"), config.path("predictions")],
    config.workdir / "layers.svg",
    side_by_side=True,
)
