import json

import numpy as np
import pytest

from paraclap.datapack import (
    Dataset,
    FeatureRef,
    ItemRecord,
    Variant,
    load_manifest,
    make_batches,
    read_embeddings,
    save_manifest,
    write_embeddings,
)
from paraclap.errors import (
    DanglingRef,
    DuplicateId,
    FormatError,
    InvalidConfig,
    MissingVariant,
    ParseError,
    ShapeMismatch,
)
from paraclap.synth import SynthConfig, synth_generate


class TestEmbeddingFiles:
    def test_round_trip_after_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((5, 8))
        p = tmp_path / "m.pce"
        write_embeddings(m, p)
        back = read_embeddings(p)
        np.testing.assert_array_equal(back, m.astype(np.float32).astype(np.float64))

    def test_write_read_write_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((7, 3))
        p1, p2 = tmp_path / "a.pce", tmp_path / "b.pce"
        write_embeddings(m, p1)
        write_embeddings(read_embeddings(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.pce"
        write_embeddings(np.ones((2, 2)), p)
        p.write_bytes(b"NOPE" + p.read_bytes()[4:])
        with pytest.raises(FormatError):
            read_embeddings(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pce"
        write_embeddings(np.ones((3, 4)), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            read_embeddings(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "t.pce"
        write_embeddings(np.ones((3, 4)), p)
        p.write_bytes(p.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError):
            read_embeddings(p)

    def test_empty_count_rejected(self, tmp_path):
        import struct

        p = tmp_path / "empty.pce"
        p.write_bytes(b"PCE1" + struct.pack("<II", 0, 4))
        with pytest.raises(FormatError):
            read_embeddings(p)

    def test_nan_payload_rejected(self, tmp_path):
        import struct

        p = tmp_path / "nan.pce"
        payload = np.array([[np.nan, 1.0]], dtype="<f4")
        p.write_bytes(b"PCE1" + struct.pack("<II", 1, 2) + payload.tobytes())
        with pytest.raises(FormatError):
            read_embeddings(p)


def _write_min_dataset(tmp_path, n=3, dim=4, with_variants=("test",)):
    rng = np.random.default_rng(7)
    write_embeddings(rng.standard_normal((n, dim)), tmp_path / "audio.pce")
    write_embeddings(rng.standard_normal((n, dim)), tmp_path / "text.pce")
    items = []
    for i in range(n):
        variants = {
            name: Variant(text=f"caption {i}", feature_ref=FeatureRef("text.pce", i))
            for name in with_variants
        }
        items.append(
            ItemRecord(
                id=f"item-{i}",
                split="train",
                audio_ref=FeatureRef("audio.pce", i),
                caption=f"caption {i}",
                variants=variants,
                tags=frozenset(),
            )
        )
    save_manifest(items, tmp_path / "m.jsonl")
    return tmp_path / "m.jsonl"


class TestManifest:
    def test_valid_three_line_manifest(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        ds = load_manifest(path)
        assert len(ds) == 3
        assert ds["item-1"].caption == "caption 1"

    def test_duplicate_id(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines + [lines[0]]) + "\n")
        with pytest.raises(DuplicateId):
            load_manifest(path)

    def test_row_out_of_range_is_dangling(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["id"] = "item-x"
        doc["audio_ref"]["row"] = 99
        path.write_text("\n".join(lines + [json.dumps(doc)]) + "\n")
        with pytest.raises(DanglingRef):
            load_manifest(path)

    def test_missing_file_is_dangling(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["id"] = "item-x"
        doc["audio_ref"]["file"] = "ghost.pce"
        path.write_text("\n".join(lines + [json.dumps(doc)]) + "\n")
        with pytest.raises(DanglingRef):
            load_manifest(path)

    def test_unknown_field_strict_vs_lax(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["surprise"] = 1
        doc["id"] = "item-x"
        path.write_text("\n".join(lines + [json.dumps(doc)]) + "\n")
        with pytest.raises(ParseError):
            load_manifest(path)
        with pytest.warns(UserWarning, match="unknown fields"):
            ds = load_manifest(path, strict=False)
        assert len(ds) == 4

    def test_unregistered_variant_strict(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["id"] = "item-x"
        doc["variants"]["mystery"] = {"text": "hello"}
        path.write_text("\n".join(lines + [json.dumps(doc)]) + "\n")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_bad_json_line_number(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        path.write_text(path.read_text() + "{not json\n")
        with pytest.raises(ParseError) as exc:
            load_manifest(path)
        assert exc.value.line == 4

    def test_inconsistent_audio_dim_rejected(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        write_embeddings(np.ones((3, 9)), tmp_path / "other.pce")
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["id"] = "item-x"
        doc["audio_ref"] = {"file": "other.pce", "row": 0}
        path.write_text("\n".join(lines + [json.dumps(doc)]) + "\n")
        with pytest.raises(ShapeMismatch):
            load_manifest(path)

    def test_load_save_load_fixpoint(self, tmp_path):
        path = _write_min_dataset(tmp_path)
        ds = load_manifest(path)
        out1 = tmp_path / "round1.jsonl"
        save_manifest(ds.items, out1)
        ds2 = load_manifest(out1)
        out2 = tmp_path / "round2.jsonl"
        save_manifest(ds2.items, out2)
        assert out1.read_bytes() == out2.read_bytes()


class TestMakeBatches:
    def _dataset(self, tmp_path, n=10):
        cfg = SynthConfig(n_train=n, n_test=2, d_feature=4, seed=5)
        train, _ = synth_generate(cfg, tmp_path / "d")
        return load_manifest(train)

    def test_batch_sizes_with_partial_tail(self, tmp_path):
        ds = self._dataset(tmp_path, n=10)
        batches = make_batches(ds, batch_size=4, seed=0)
        assert [b.n for b in batches] == [4, 4, 2]

    def test_same_seed_same_order(self, tmp_path):
        ds = self._dataset(tmp_path, n=10)
        a = make_batches(ds, batch_size=3, seed=9)
        b = make_batches(ds, batch_size=3, seed=9)
        assert [x.ids for x in a] == [y.ids for y in b]
        c = make_batches(ds, batch_size=3, seed=10)
        assert [x.ids for x in a] != [z.ids for z in c]

    def test_missing_variant(self, tmp_path):
        path = _write_min_dataset(tmp_path, with_variants=("test", "p1"))
        ds = load_manifest(path)
        with pytest.raises(MissingVariant) as exc:
            make_batches(ds, batch_size=2, seed=0, variant_pair=("p1", "p2"))
        assert exc.value.name == "p2"

    def test_rows_aligned_by_id(self, tmp_path):
        ds = self._dataset(tmp_path, n=8)
        for batch in make_batches(ds, batch_size=3, seed=2):
            for row, item_id in enumerate(batch.ids):
                item = ds[item_id]
                np.testing.assert_array_equal(batch.audio[row], ds.audio_features(item))
                np.testing.assert_array_equal(
                    batch.para2[row], ds.variant_features(item, "p2")
                )

    def test_anchor_only_batches_skip_paraphrase_variants(self, tmp_path):
        path = _write_min_dataset(tmp_path, with_variants=("test",))
        ds = load_manifest(path)
        batches = make_batches(ds, batch_size=2, seed=0, variant_pair=None)
        assert batches[0].para1 is batches[0].text


class TestSynthGenerate:
    def test_zero_noise_views_identical(self, tmp_path):
        cfg = SynthConfig(
            n_train=4,
            n_test=3,
            d_feature=5,
            noise_audio=0.0,
            noise_text=0.0,
            para_noise_p1=0.0,
            para_noise_p2=0.0,
            testp_noise=0.0,
            seed=1,
        )
        train, test = synth_generate(cfg, tmp_path / "z")
        ds = load_manifest(train)
        for item in ds.items:
            a = ds.audio_features(item)
            np.testing.assert_array_equal(a, ds.variant_features(item, "test"))
            np.testing.assert_array_equal(a, ds.variant_features(item, "p1"))
            np.testing.assert_array_equal(a, ds.variant_features(item, "p2"))

    def test_byte_identical_across_runs(self, tmp_path):
        cfg = SynthConfig(n_train=6, n_test=4, d_feature=8, seed=42)
        synth_generate(cfg, tmp_path / "r1")
        synth_generate(cfg, tmp_path / "r2")
        files1 = sorted(p.name for p in (tmp_path / "r1").iterdir())
        files2 = sorted(p.name for p in (tmp_path / "r2").iterdir())
        assert files1 == files2
        for name in files1:
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_output_passes_validation(self, tmp_path):
        cfg = SynthConfig(
            n_train=5, n_test=5, d_feature=6, seed=3, attr_mod_noise=0.5, event_mod_noise=1.5
        )
        train, test = synth_generate(cfg, tmp_path / "v")
        train_ds = load_manifest(train)
        test_ds = load_manifest(test)
        assert len(train_ds.train_items) == 5
        assert len(test_ds.test_items) == 5
        item = test_ds.items[0]
        assert set(item.variants) == {"test", "test_p", "attr_mod", "event_mod"}
        assert item.variants["test"].text == item.caption

    def test_paraphrase_levels_nest(self):
        with pytest.raises(InvalidConfig):
            SynthConfig(para_noise_p1=2.0, para_noise_p2=1.0)

    def test_negative_noise_rejected(self):
        with pytest.raises(InvalidConfig):
            SynthConfig(noise_audio=-0.1)

    def test_p1_text_keeps_vocabulary(self, tmp_path):
        cfg = SynthConfig(n_train=10, n_test=2, d_feature=4, seed=11)
        train, _ = synth_generate(cfg, tmp_path / "t")
        ds = load_manifest(train)
        for item in ds.items:
            orig = sorted(item.caption.lower().strip(".").split())
            p1 = sorted(item.variants["p1"].text.lower().strip(".").split())
            assert orig == p1
