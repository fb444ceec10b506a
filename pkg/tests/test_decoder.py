import pytest
import torch

from styler import AUDIO_FACTORS
from styler.decoder import DecoderInput, MelDecoder
from styler.errors import InvalidInput
from styler.model import FactorInput
from styler.objectives import compute_losses, mel_loss

from conftest import make_model, random_batch, tiny_config


def refs_of(batch):
    return {f: FactorInput(batch.enc_inputs[f], batch.frame_lengths) for f in AUDIO_FACTORS}


def test_zero_noise_matches_clean(cfg):
    dec = MelDecoder(cfg).eval()
    summed = torch.randn(2, 4, cfg.hidden_dim)
    inp = DecoderInput(summed, torch.tensor([[1, 2, 0, 3], [2, 2, 0, 0]]), torch.tensor([4, 2]))
    clean, lengths = dec.decode_clean(inp)
    noisy, _ = dec.decode_noisy(inp, torch.zeros_like(summed))
    res_clean, res_noisy, _ = dec.decode_residual(inp, torch.zeros_like(summed))
    assert lengths.tolist() == [6, 4]
    assert clean.shape == (2, 6, cfg.n_mels)
    torch.testing.assert_close(clean, noisy)
    torch.testing.assert_close(res_clean, clean, rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(res_noisy, clean, rtol=1e-5, atol=1e-6)


def test_zero_total_duration(cfg):
    dec = MelDecoder(cfg)
    inp = DecoderInput(torch.randn(1, 2, cfg.hidden_dim), torch.zeros(1, 2, dtype=torch.long), torch.tensor([2]))
    with pytest.raises(InvalidInput):
        dec.decode_clean(inp)


def grads_of(module):
    return [p.grad for p in module.parameters()]


def is_zero(grads):
    return all(g is None or torch.all(g == 0) for g in grads)


@pytest.mark.parametrize("seed", range(3))
def test_noisy_loss_only_reaches_noise_encoder(seed):
    cfg = tiny_config()
    m = make_model(cfg, seed=seed)
    b = random_batch(cfg, [(5, 18), (3, 11)], seed=seed)
    out = m(b, noise_modeling=True)
    T = out.mel_clean.shape[1]
    frame_mask = torch.arange(T)[None] < out.frame_lengths[:, None]
    mel_loss(out.mel_noisy, b.noisy_target_mel[:, :T], frame_mask).backward()
    for name in ("duration", "pitch", "energy"):
        assert is_zero(grads_of(m.audio_encoders[name])), name
    assert is_zero(grads_of(m.text_encoder))
    assert is_zero(grads_of(m.speaker_encoder))
    assert not is_zero(grads_of(m.audio_encoders["noise"]))
    assert not is_zero(grads_of(m.decoder))


def test_single_decoder_call_per_utterance():
    cfg = tiny_config()
    m = make_model(cfg).eval()
    for n, t, render in [(3, 9, False), (9, 60, True), (1, 4, False)]:
        b = random_batch(cfg, [(n, t)], seed=n)
        before = m.decoder.calls
        out = m.synthesize(b.phone_ids[0], refs_of(b), speaker_id="spk_a", render_noise=render,
                           durations=b.durations[0])
        assert m.decoder.calls - before == 1
        assert out.mel.shape == (t, cfg.n_mels)
        assert (out.mel_noisy is not None) == render


def test_synthesis_paths():
    cfg = tiny_config()
    m = make_model(cfg).eval()
    b = random_batch(cfg, [(6, 20)], seed=8)
    refs = refs_of(b)
    a = m.synthesize(b.phone_ids[0], refs, speaker_id="spk_a")
    again = m.synthesize(b.phone_ids[0], refs, speaker_id="spk_a")
    assert torch.equal(a.mel, again.mel)
    silenced = m.synthesize(b.phone_ids[0], refs, speaker_id="spk_a", masks={"noise"})
    assert silenced.mel_noisy is None
    fixed = m.synthesize(b.phone_ids[0], {}, masks=set(AUDIO_FACTORS) | {"speaker"})
    assert torch.isfinite(fixed.mel).all() and fixed.mel.shape[0] >= 1
    with pytest.raises(InvalidInput):
        m.synthesize(b.phone_ids[0], {"pitch": refs["pitch"]}, speaker_id="spk_a")


def test_decoder_overfits_single_target():
    torch.manual_seed(0)
    cfg = tiny_config(fft_dropout=0.0)
    dec = MelDecoder(cfg)
    summed = torch.randn(1, 5, cfg.hidden_dim)
    inp = DecoderInput(summed, torch.tensor([[2, 3, 1, 2, 2]]), torch.tensor([5]))
    target = torch.randn(1, 10, cfg.n_mels) * 0.5 - 3
    opt = torch.optim.Adam(dec.parameters(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        mel, _ = dec.decode_clean(inp)
        loss = mel_loss(mel, target)
        loss.backward()
        opt.step()
    assert loss.item() < 0.1


def test_training_losses_finite(cfg):
    m = make_model(cfg)
    b = random_batch(cfg, [(4, 10), (6, 22)])
    total, parts = compute_losses(m(b), b)
    assert torch.isfinite(total)
    assert parts.l_mel_noisy > 0 and parts.l_aug > 0
