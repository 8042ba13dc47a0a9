"""Synthetic benchmark generator.

Each item is a latent concept vector; audio and text features are noisy views
of it, and paraphrase variants are progressively noisier views of the text
features. That makes the paraphrased test condition measurably harder than
the clean one, which is exactly the gap the trainer is supposed to close.

Captions are templated two-clause scene descriptions so the text-side tooling
(paraphrase pipeline, annotation sessions) has realistic strings to chew on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapack import FeatureRef, ItemRecord, Variant, save_manifest, write_embeddings
from .errors import InvalidConfig

_SCENES = [
    ("a dog", "barks"),
    ("a cat", "meows"),
    ("a bird", "chirps"),
    ("a man", "talks"),
    ("a woman", "laughs"),
    ("a child", "cries"),
    ("a car", "honks"),
    ("a train", "rumbles"),
    ("an engine", "hums"),
    ("rain", "falls"),
    ("wind", "blows"),
    ("thunder", "roars"),
    ("a crowd", "cheers"),
    ("a phone", "rings"),
    ("a door", "creaks"),
    ("a clock", "ticks"),
    ("water", "drips"),
    ("a machine", "whirs"),
    ("a bell", "chimes"),
    ("music", "plays"),
]

_ATTRIBUTES = ["loudly", "softly", "steadily", "faintly", "repeatedly"]

_ATTRIBUTE_SYNONYMS = {
    "loudly": "noisily",
    "softly": "quietly",
    "steadily": "evenly",
    "faintly": "weakly",
    "repeatedly": "over and over",
}

_SCENE_SYNONYMS = {
    "a dog barks": "a hound woofs",
    "a cat meows": "a feline mews",
    "a bird chirps": "a songbird tweets",
    "a man talks": "a male speaks",
    "a woman laughs": "a female chuckles",
    "a child cries": "a kid wails",
    "a car honks": "a vehicle beeps",
    "a train rumbles": "a locomotive thunders",
    "an engine hums": "a motor drones",
    "rain falls": "rainfall patters",
    "wind blows": "a breeze gusts",
    "thunder roars": "a storm booms",
    "a crowd cheers": "an audience applauds",
    "a phone rings": "a telephone buzzes",
    "a door creaks": "a hinge squeaks",
    "a clock ticks": "a timepiece clicks",
    "water drips": "liquid trickles",
    "a machine whirs": "a device spins",
    "a bell chimes": "a bell tolls",
    "music plays": "a tune sounds",
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator; paraphrase noise must nest (p1 <= p2)."""

    n_train: int = 2000
    n_test: int = 500
    d_feature: int = 32
    noise_audio: float = 0.1
    noise_text: float = 0.1
    para_noise_p1: float = 0.75
    para_noise_p2: float = 1.5
    testp_noise: float = 1.5
    seed: int = 42
    attr_mod_noise: float | None = None
    event_mod_noise: float | None = None

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidConfig("n_train and n_test must be >= 1")
        if self.d_feature < 1:
            raise InvalidConfig("d_feature must be >= 1")
        noises = [
            self.noise_audio,
            self.noise_text,
            self.para_noise_p1,
            self.para_noise_p2,
            self.testp_noise,
        ]
        if self.attr_mod_noise is not None:
            noises.append(self.attr_mod_noise)
        if self.event_mod_noise is not None:
            noises.append(self.event_mod_noise)
        if any(s < 0 for s in noises):
            raise InvalidConfig("noise std-devs must be >= 0")
        if self.para_noise_p1 > self.para_noise_p2:
            raise InvalidConfig(
                f"para_noise_p1 ({self.para_noise_p1}) must be <= para_noise_p2 "
                f"({self.para_noise_p2}); level 2 perturbs more"
            )


@dataclass(frozen=True)
class _Scene:
    subject1: str
    verb1: str
    attribute: str | None
    subject2: str
    verb2: str

    def caption(self) -> str:
        head = f"{self.subject1} {self.verb1}"
        if self.attribute:
            head += f" {self.attribute}"
        return _sentence(f"{head} while {self.subject2} {self.verb2}")

    def variant_text(self, name: str) -> str:
        first = f"{self.subject1} {self.verb1}"
        first_attr = f"{first} {self.attribute}" if self.attribute else first
        second = f"{self.subject2} {self.verb2}"
        if name == "test":
            return self.caption()
        if name == "p1":
            # structure only: clauses swapped, wording kept
            return _sentence(f"{second} while {first_attr}")
        if name == "p2":
            sub1 = _SCENE_SYNONYMS[first]
            sub2 = _SCENE_SYNONYMS[second]
            attr = _ATTRIBUTE_SYNONYMS[self.attribute] if self.attribute else None
            head = f"{sub1} {attr}" if attr else sub1
            return _sentence(f"{sub2} while {head}")
        if name == "test_p":
            sub1 = _SCENE_SYNONYMS[first]
            sub2 = _SCENE_SYNONYMS[second]
            attr = _ATTRIBUTE_SYNONYMS[self.attribute] if self.attribute else None
            head = f"{sub1} {attr}" if attr else sub1
            return _sentence(f"{head} as {sub2}")
        if name == "attr_mod":
            attr = _ATTRIBUTE_SYNONYMS[self.attribute] if self.attribute else None
            head = f"{first} {attr}" if attr else first
            return _sentence(f"{head} while {second}")
        if name == "event_mod":
            head = _SCENE_SYNONYMS[first]
            if self.attribute:
                head += f" {self.attribute}"
            return _sentence(f"{head} while {_SCENE_SYNONYMS[second]}")
        raise InvalidConfig(f"unknown variant {name!r}")


def _sentence(body: str) -> str:
    return body[0].upper() + body[1:] + "."


def _draw_scene(rng: np.random.Generator) -> _Scene:
    i = int(rng.integers(len(_SCENES)))
    j = int(rng.integers(len(_SCENES) - 1))
    if j >= i:
        j += 1
    has_attr = bool(rng.random() < 0.35)
    attr = _ATTRIBUTES[int(rng.integers(len(_ATTRIBUTES)))] if has_attr else None
    return _Scene(
        subject1=_SCENES[i][0],
        verb1=_SCENES[i][1],
        attribute=attr,
        subject2=_SCENES[j][0],
        verb2=_SCENES[j][1],
    )


def _split_variants(cfg: SynthConfig, split: str) -> list[tuple[str, float]]:
    if split == "train":
        return [("p1", cfg.para_noise_p1), ("p2", cfg.para_noise_p2)]
    extra = [("test_p", cfg.testp_noise)]
    if cfg.attr_mod_noise is not None:
        extra.append(("attr_mod", cfg.attr_mod_noise))
    if cfg.event_mod_noise is not None:
        extra.append(("event_mod", cfg.event_mod_noise))
    return extra


def synth_generate(cfg: SynthConfig, out_dir) -> tuple[Path, Path]:
    """Write train/test manifests plus embedding files under ``out_dir``.

    Fully determined by ``cfg.seed``: one feature stream, one caption stream,
    drawn in a fixed order. Noise std 0 leaves views bitwise equal to the
    concept vectors.

    Returns (train_manifest_path, test_manifest_path).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng_feat = np.random.default_rng([cfg.seed, 0])
    rng_text = np.random.default_rng([cfg.seed, 1])

    manifests = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        concept = rng_feat.standard_normal((n, cfg.d_feature))
        audio = concept + cfg.noise_audio * rng_feat.standard_normal((n, cfg.d_feature))
        text = concept + cfg.noise_text * rng_feat.standard_normal((n, cfg.d_feature))
        variant_mats = {"test": text}
        for name, std in _split_variants(cfg, split):
            variant_mats[name] = text + std * rng_feat.standard_normal((n, cfg.d_feature))

        files = {"audio": f"{split}.audio.pce"}
        write_embeddings(audio, out / files["audio"])
        for name, mat in variant_mats.items():
            files[name] = f"{split}.{name}.pce"
            write_embeddings(mat, out / files[name])

        items = []
        for i in range(n):
            scene = _draw_scene(rng_text)
            variants = {
                name: Variant(
                    text=scene.variant_text(name),
                    feature_ref=FeatureRef(file=files[name], row=i),
                )
                for name in variant_mats
            }
            tags = frozenset({"has_attribute"} if scene.attribute else set())
            items.append(
                ItemRecord(
                    id=f"{split}-{i:05d}",
                    split=split,
                    audio_ref=FeatureRef(file=files["audio"], row=i),
                    caption=scene.caption(),
                    variants=variants,
                    tags=tags,
                )
            )
        manifest_path = out / f"{split}.jsonl"
        save_manifest(items, manifest_path)
        manifests[split] = manifest_path
    return manifests["train"], manifests["test"]
