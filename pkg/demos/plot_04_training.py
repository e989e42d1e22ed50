"""
Training with and without the alignment terms
=============================================

A small visual model is trained twice on the same corpus: once with plain
cross-entropy on both speech types, once with the alignment terms added.
Viseme error rates on held-out speakers show where the extra terms help.
This takes under a minute on one core; the full comparison across seeds
is the ``visememl table`` campaign.
"""

from pathlib import Path

from visememl.config import load_config
from visememl.losses import LossConfig
from visememl.metrics import ver
from visememl.models import VisualModel
from visememl.synth import SpeechType, gen_dataset
from visememl.training import by_type, max_length, predict_visemes, train_visual

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.ini")
ds = gen_dataset(cfg.gen)
L = max_length(ds)
n_train = {t: len(by_type(ds.train, t)) for t in SpeechType}

for terms in ("NCE+SCE", "NCE+SCE+WKL+NKL+SKL"):
    weights = {t: w for t, w in cfg.weights.items() if t in terms.split("+")}
    loss = LossConfig.parse(terms, weights=weights, n_normal=n_train[SpeechType.NORMAL],
                            n_silent=n_train[SpeechType.SILENT])
    model = VisualModel(cfg.visual, seed=0)
    result = train_visual(model, ds, loss, cfg.train)
    rates = {}
    for t in SpeechType:
        utts = by_type(ds.test, t)
        rates[t.value] = ver([u.labels for u in utts], predict_visemes(model, utts, L))
    print(f"{terms:<22} best epoch {result.best_epoch:2d}  "
          f"VER normal {100 * rates['normal']:.2f}%  silent {100 * rates['silent']:.2f}%")
