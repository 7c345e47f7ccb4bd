import numpy as np
import pytest

from noisyasr.audio import apply_recipe, measured_snr, read_recipes, read_wav
from noisyasr.corpus import (NOISE_TYPES, ManifestEntry, NoiseFile, NoiseLabel, SynthSpec, build_noisy_test_set,
                             load_manifest, load_noise_list, partition_noise_set, peak_transcribe, render,
                             save_manifest, save_noise_list, synth_corpus, synth_noise, synth_noise_set)


def test_labels():
    assert len(NOISE_TYPES) == 7
    assert [l.index for l in NoiseLabel] == list(range(8))
    assert NoiseLabel.CLEAN.index == 7
    with pytest.raises(ValueError, match="Foo"):
        NoiseLabel.parse("Foo")


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("u1", "wav/u1.wav", "a b"),
               ManifestEntry("u2", "wav/u2.wav", "c, d", NoiseLabel.CAR, 5.0),
               ManifestEntry("u3", "/abs/u3.wav", "e", NoiseLabel.CLEAN)]
    save_manifest(entries, tmp_path / "m.csv")
    assert load_manifest(tmp_path / "m.csv") == entries


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("utterance_id,audio_path,transcript,noise_label,snr_db\nu1,a.wav,x,,\nu2,b.wav,y,Foo,0\n")
    with pytest.raises(ValueError, match=":3:"):
        load_manifest(p)
    p.write_text("utterance_id,audio_path,transcript,noise_label,snr_db\n")
    assert load_manifest(p) == []
    p.write_text("id,path\n")
    with pytest.raises(ValueError, match=":1:"):
        load_manifest(p)
    with pytest.raises(ValueError):
        ManifestEntry("u", "p", "t", NoiseLabel.CAR, None)


def fake_noise(n_files):
    rng = np.random.default_rng(0)
    from noisyasr.audio import AudioBuffer
    return {lab: [NoiseFile(f"{lab.value}_{i}", lab, AudioBuffer(rng.standard_normal(400) + 0.01))
                  for i in range(n_files)] for lab in NOISE_TYPES}


def test_partition_sizes_and_disjointness():
    files = fake_noise(18)
    train, test = partition_noise_set(files, 10, 8, seed=1)
    again = partition_noise_set(files, 10, 8, seed=1)
    for lab in NOISE_TYPES:
        tr, te = {f.noise_id for f in train[lab]}, {f.noise_id for f in test[lab]}
        assert len(tr) == 10 and len(te) == 8 and not tr & te
        assert [f.noise_id for f in again[0][lab]] == [f.noise_id for f in train[lab]]
    with pytest.raises(ValueError):
        partition_noise_set(fake_noise(5), 10, 8)


def test_noise_list_round_trip(tmp_path):
    noise = synth_noise_set(18, 0.2, seed=2, out_dir=tmp_path)
    train, test = partition_noise_set(noise, 10, 8, seed=0)
    save_noise_list(train, test, tmp_path / "list.csv")
    back = load_noise_list(tmp_path / "list.csv", "test")
    for lab in NOISE_TYPES:
        assert [f.noise_id for f in back[lab]] == [f.noise_id for f in test[lab]]
        np.testing.assert_array_equal(back[lab][0].audio.samples, test[lab][0].audio.samples.astype(np.float32))


@pytest.mark.parametrize("n_utts, snrs, expected", [(1, (0, 5, 10, 15, 20), 5), (0, (0,), 0), (3, (0, 10), 6)])
def test_grid_cardinality_one_type(n_utts, snrs, expected):
    pairs = synth_corpus(SynthSpec(seed=1), n_utts, "t")
    test = {NoiseLabel.CAR: fake_noise(2)[NoiseLabel.CAR]}
    entries, recipes = build_noisy_test_set(pairs, test, snrs, seed=0)
    assert len(entries) == len(recipes) == expected


def test_grid_written_files_hit_target_snr(tmp_path):
    pairs = synth_corpus(SynthSpec(seed=1), 2, "t")
    noise = synth_noise_set(2, 1.0, seed=3)
    entries, _ = build_noisy_test_set(pairs, noise, (0, 20), seed=5, out_dir=tmp_path)
    assert len(entries) == 2 * 7 * 2
    assert load_manifest(tmp_path / "manifest.csv") == entries
    clean = {e.utterance_id: a for e, a in pairs}
    by_id = {f"{l.value}:{f.noise_id}": f.audio for l, fs in noise.items() for f in fs}
    for (uid, recipe), e in zip(read_recipes(tmp_path / "recipes.csv"), entries):
        c = clean[uid.split("__")[0]]
        component = apply_recipe(c, by_id[recipe.noise_label], recipe).samples - c.samples
        exact = recipe.gain * np.resize(np.roll(by_id[recipe.noise_label].samples, -recipe.noise_offset), len(c))
        assert abs(measured_snr(c, exact) - e.snr_db) < 1e-6
        np.testing.assert_allclose(component, exact, atol=1e-12)
        on_disk = read_wav(tmp_path / e.audio_path).samples
        np.testing.assert_allclose(on_disk, (c.samples + exact).astype(np.float32), atol=0)


def test_grid_is_order_independent():
    pairs = synth_corpus(SynthSpec(seed=1), 3, "t")
    noise = fake_noise(3)
    a, ra = build_noisy_test_set(pairs, noise, (0, 5), seed=7)
    b, rb = build_noisy_test_set(pairs[::-1], noise, (0, 5), seed=7, threads=3)
    assert sorted(ra) == sorted(rb)


def test_render_length_and_symbol_frequencies():
    spec = SynthSpec()
    assert len(render("ab", spec)) == 3200
    audio = render("ae c", spec)
    n = spec.symbol_samples
    segs = [audio.samples[0:n], audio.samples[n:2 * n], audio.samples[2 * n + spec.gap_samples:3 * n + spec.gap_samples]]
    for seg, sym in zip(segs, "aec"):
        k = np.arange(n)
        # direct DFT oracle restricted to the positive half
        mags = [abs(np.sum(seg * np.exp(-2j * np.pi * j * k / n))) for j in range(n // 2)]
        f_peak = int(np.argmax(mags)) * spec.sample_rate_hz / n
        assert f_peak == pytest.approx(spec.freqs_hz[spec.vocab.index(sym)], abs=spec.sample_rate_hz / n)


def test_synth_corpus_is_deterministic_and_transcribable():
    spec = SynthSpec(seed=4)
    a = synth_corpus(spec, 30, "x")
    b = synth_corpus(spec, 30, "x")
    for (ea, aa), (eb, ab) in zip(a, b):
        assert ea == eb and aa.samples.tobytes() == ab.samples.tobytes()
        assert peak_transcribe(aa, spec) == ea.transcript


def band_energies(x, n_bands=24):
    p = np.abs(np.fft.rfft(x)) ** 2
    return np.log(np.array([b.mean() for b in np.array_split(p, n_bands)]) + 1e-12)


def test_synth_noise_types_are_normalized_and_separable():
    rng = np.random.default_rng(0)
    feats, labels = [], []
    for lab in NOISE_TYPES:
        for _ in range(6):
            x = synth_noise(lab, 1.0, rng).samples
            assert np.sqrt(np.mean(x ** 2)) == pytest.approx(0.3)
            feats.append(band_energies(x))
            labels.append(lab.index)
    feats, labels = np.array(feats), np.array(labels)
    # leave-one-out nearest centroid
    hits = 0
    for i in range(len(feats)):
        keep = np.arange(len(feats)) != i
        cents = {l.index: feats[keep & (labels == l.index)].mean(0) for l in NOISE_TYPES}
        pred = min(cents, key=lambda l: np.sum((feats[i] - cents[l]) ** 2))
        hits += pred == labels[i]
    assert hits / len(feats) >= 0.9
    with pytest.raises(ValueError):
        synth_noise(NoiseLabel.CLEAN, 1.0, rng)
