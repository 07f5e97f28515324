import filecmp
import math

import numpy as np
import pytest

from dcae.corpus import (CONDITIONS, CorpusFormatError, CorpusSpec, Utterance, Word, corrupt,
                         gen_corpus, load_manifest, load_utterance, make_vocab, measured_snr_db,
                         noise_trajectory, phone_sequence, read_lexicon, read_manifest,
                         save_utterance, snr_gain)


def all_utts(corpus):
    return corpus.train + [u for c in CONDITIONS for u in corpus.test[f"test_{c}"]]


class TestSnrGain:
    @pytest.mark.parametrize("s, n, snr, g", [(1, 1, 0, 1.0), (4, 1, 0, 2.0), (1, 1, 20, 0.1)])
    def test_examples(self, s, n, snr, g):
        assert snr_gain(s, n, snr) == pytest.approx(g, rel=1e-12)

    def test_rejects_zero_power(self):
        with pytest.raises(ValueError):
            snr_gain(0.0, 1.0, 10.0)
        with pytest.raises(ValueError):
            snr_gain(1.0, 0.0, 10.0)


class TestCorrupt:
    def test_no_noise_no_channel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(7, 4))
        assert np.array_equal(corrupt(x, None, 10.0), x)
        assert np.array_equal(corrupt(x, 3, float("inf")), x)

    def test_zero_signal_with_bias(self):
        b = np.array([0.5, -1.0, 2.0])
        assert np.array_equal(corrupt(np.zeros((5, 3)), None, 0.0, channel=b), np.tile(b, (5, 1)))

    @pytest.mark.parametrize("noise_type", [1, 2, 3, 4, 5, 6])
    @pytest.mark.parametrize("snr", [10.0, 15.0, 20.0])
    def test_hits_target_snr(self, noise_type, snr):
        rng = np.random.default_rng([noise_type, int(snr)])
        x = rng.normal(size=(60, 8)) + 1.0
        y = corrupt(x, noise_type, snr, rng=rng)
        got = 10 * math.log10(np.mean(x ** 2) / np.mean((y - x) ** 2))
        assert abs(got - snr) <= 0.5

    def test_needs_rng_for_noise(self):
        with pytest.raises(ValueError):
            corrupt(np.ones((3, 2)), 1, 10.0)

    def test_bad_channel_length(self):
        with pytest.raises(ValueError):
            corrupt(np.ones((3, 2)), None, 10.0, channel=np.ones(3))

    def test_noise_classes_differ(self):
        a = noise_trajectory(1, 50, 6, np.random.default_rng(0))
        b = noise_trajectory(4, 50, 6, np.random.default_rng(0))
        assert not np.allclose(a, b)


class TestVocab:
    def test_prefix_free(self):
        vocab = make_vocab(25, 6, np.random.default_rng(1))
        prons = [w.phones for w in vocab]
        assert len(set(prons)) == 25
        for a in prons:
            for b in prons:
                if a is not b:
                    assert a[:len(b)] != b
                    assert all(x != y for x, y in zip(a, a[1:]))

    def test_too_large(self):
        with pytest.raises(ValueError):
            make_vocab(100, 2, np.random.default_rng(0), min_len=2, max_len=2)


class TestGeneration:
    def test_split_sizes(self, tiny_corpus, tiny_spec):
        assert len(tiny_corpus.train) == 2 * tiny_spec.num_utts
        for c in CONDITIONS:
            assert len(tiny_corpus.test[f"test_{c}"]) == tiny_spec.num_test_per_condition

    def test_train_is_multi_condition_pairs(self, tiny_corpus):
        tr = tiny_corpus.train
        assert [u.condition for u in tr[:4]] == ["A", "B", "A", "B"]
        for a, b in zip(tr[::2], tr[1::2]):
            assert np.array_equal(a.clean, b.clean)
            assert np.array_equal(a.alignment, b.alignment)

    def test_condition_semantics(self, tiny_corpus, tiny_spec):
        channels = tiny_corpus.model.channels
        for u in all_utts(tiny_corpus):
            if u.condition == "A":
                assert np.array_equal(u.noisy, u.clean) and u.noise_id == 0
            if u.condition in ("B", "D"):
                assert u.noise_id in tiny_spec.noise_types
                assert 10.0 <= u.snr_db <= 20.0
                assert abs(measured_snr_db(u, channels) - u.snr_db) <= 0.5
            if u.condition == "C":
                diff = u.noisy.astype(np.float64) - u.clean
                assert np.allclose(diff, channels[u.channel], atol=1e-5)
                assert u.channel >= 1
            if u.condition == "D":
                assert u.channel >= 1

    def test_alignment_expands_transcript(self, tiny_corpus):
        lex = tiny_corpus.model.lexicon
        for u in all_utts(tiny_corpus):
            ali = u.alignment
            entries = ali[ali % 2 == 0] // 2
            assert entries.tolist() == phone_sequence(u.transcript, lex)
            assert ali[0] % 2 == 0
            # a loop pdf continues the phone it follows
            for prev, cur in zip(ali, ali[1:]):
                if cur % 2:
                    assert cur // 2 == prev // 2
            lo, hi = 12, 30
            assert lo <= u.num_frames <= hi

    def test_minimum_phone_duration(self, tiny_corpus, tiny_spec):
        for u in tiny_corpus.train:
            starts = np.flatnonzero(u.alignment % 2 == 0).tolist() + [u.num_frames]
            assert min(np.diff(starts)) >= tiny_spec.min_phone_frames

    def test_speaker_embedding_per_speaker(self, tiny_corpus):
        by_spk = {}
        for u in all_utts(tiny_corpus):
            prev = by_spk.setdefault(u.speaker_id, u.spk_embed)
            assert np.array_equal(prev, u.spk_embed)
            assert np.linalg.norm(u.spk_embed) == pytest.approx(1.0, abs=1e-6)

    def test_empty_corpus_writes_nothing(self, tmp_path):
        spec = CorpusSpec(num_phones=4, feat_dim=3, spk_embed_dim=2, num_utts=0,
                          num_test_per_condition=0, vocab_size=3)
        corpus = gen_corpus(spec, tmp_path / "c")
        assert corpus.train == [] and not (tmp_path / "c").exists()

    def test_fixed_vocab(self):
        spec = CorpusSpec(num_phones=3, feat_dim=3, spk_embed_dim=2, num_utts=2,
                          num_test_per_condition=0, utt_len_range=(6, 20),
                          vocab=[{"name": "one", "phones": [0, 1]}, {"name": "two", "phones": [2]}])
        corpus = gen_corpus(spec)
        assert [w.name for w in corpus.model.vocab] == ["one", "two"]

    @pytest.mark.parametrize("kw", [dict(num_phones=1), dict(num_utts=-1),
                                    dict(snr_range_db=(20, 10)), dict(noise_types=(0,)),
                                    dict(num_channels=1), dict(utt_len_range=(10, 5)),
                                    dict(vocab=[Word("x", (12,))])])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            CorpusSpec(**kw).validate()


class TestFiles:
    def test_same_seed_same_bytes(self, tiny_spec, tmp_path):
        gen_corpus(tiny_spec, tmp_path / "a")
        gen_corpus(tiny_spec, tmp_path / "b")
        names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert names
        for n in names:
            assert filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False), n

    def test_layout_and_manifest(self, tiny_spec, tmp_path):
        corpus = gen_corpus(tiny_spec, tmp_path)
        for name in ["train.scp", "corruption.tsv", "lexicon.txt", "corpus.json", "channels.txt"]:
            assert (tmp_path / name).exists()
        entries = read_manifest(tmp_path / "test_B.scp")
        assert [e.id for e in entries] == [u.id for u in corpus.test["test_B"]]
        assert all(e.condition == "B" and e.path == f"utts/{e.id}.dcae" for e in entries)
        assert [w.phones for w in read_lexicon(tmp_path / "lexicon.txt")] == corpus.model.lexicon

    def test_load_manifest_restores_metadata(self, tiny_spec, tmp_path):
        corpus = gen_corpus(tiny_spec, tmp_path)
        back = load_manifest(tmp_path / "test_D.scp")
        for a, b in zip(corpus.test["test_D"], back):
            assert (a.id, a.speaker_id, a.condition, a.noise_id, a.channel) == \
                   (b.id, b.speaker_id, b.condition, b.noise_id, b.channel)
            assert a.snr_db == b.snr_db
            assert np.array_equal(a.noisy, b.noisy) and np.array_equal(a.alignment, b.alignment)
            assert np.array_equal(a.transcript, b.transcript)

    def test_utterance_round_trip(self, tiny_corpus, tmp_path):
        u = tiny_corpus.test["test_C"][0]
        save_utterance(u, tmp_path / "u.dcae")
        back = load_utterance(tmp_path / "u.dcae")
        assert back.id == "u"
        for f in ("clean", "noisy", "alignment", "transcript", "spk_embed"):
            assert np.array_equal(getattr(u, f), getattr(back, f))

    def test_bad_magic(self, tiny_corpus, tmp_path):
        path = tmp_path / "u.dcae"
        save_utterance(tiny_corpus.train[0], path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CorpusFormatError, match="magic"):
            load_utterance(path)

    def test_checksum(self, tiny_corpus, tmp_path):
        path = tmp_path / "u.dcae"
        save_utterance(tiny_corpus.train[0], path)
        data = bytearray(path.read_bytes())
        data[30] ^= 1
        path.write_bytes(bytes(data))
        with pytest.raises(CorpusFormatError, match="checksum"):
            load_utterance(path)

    def test_truncated(self, tiny_corpus, tmp_path):
        path = tmp_path / "u.dcae"
        save_utterance(tiny_corpus.train[0], path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CorpusFormatError):
            load_utterance(path)

    def test_alignment_length_mismatch(self):
        with pytest.raises(ValueError, match="alignment"):
            Utterance("u", "s", "A", np.zeros((4, 2)), np.zeros((4, 2)), [0, 1, 1],
                      [0], np.zeros(2)).validate()

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "x.scp").write_text("a\tb\tZ\tutts/a.dcae\n")
        with pytest.raises(CorpusFormatError):
            read_manifest(tmp_path / "x.scp")
