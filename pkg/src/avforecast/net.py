"""Generator (frame encoder/decoder, prediction LSTM, audio-visual
transformer encoders, prior/posterior LSTMs) and the two-part discriminator,
written over a flat :class:`~avforecast.diffcore.ParamStore`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .avfeat import position_table
from .diffcore import ShapeError

STREAMS = ("vprior", "vpost", "audio")
DISC_PREFIXES = ("dstd.", "dseq.")


@dataclass(frozen=True)
class NetConfig:
    frame_size: int = 48
    channels: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 128
    z_dim: int = 10
    hidden: int = 256
    pn_layers: int = 2
    heads: int = 4
    tf_layers: int = 1
    ff_dim: int = 128
    feedforward: bool = True
    residual: bool = True
    audio_shape: tuple[int, int] = (128, 9)
    audio_gain: float = 1.0 / 64.0
    disc_channels: tuple[int, ...] = (16, 32, 64)
    disc_feat: int = 128
    disc_audio: int = 64
    disc_hidden: int = 256
    history: int = 2  # R
    lookahead: int = 1  # k
    slope: float = 0.2
    bn_momentum: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "disc_channels", tuple(self.disc_channels))
        object.__setattr__(self, "audio_shape", tuple(self.audio_shape))
        if self.frame_size % (2 ** len(self.channels)):
            raise ValueError(f"frame_size {self.frame_size} not divisible by 2^{len(self.channels)}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for position codes")

    @property
    def d_k(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGaussian:
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class FrameEmbedding:
    code: torch.Tensor  # (N, embed_dim)
    skips: list[torch.Tensor]


@dataclass
class RolloutResult:
    frames: torch.Tensor  # (N, T - F, H, W): generated frames F+1..T
    priors: list[LatentGaussian] = field(default_factory=list)
    posteriors: list[LatentGaussian] = field(default_factory=list)
    z: list[torch.Tensor] = field(default_factory=list)


def sample_latent(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mu + exp(log_var / 2) * noise``."""
    return dc.add(g.mu, dc.mul(dc.exp(g.log_var * 0.5), noise))


def _lstm_state(n: int, hidden: int, layers: int):
    return [(torch.zeros(n, hidden, dtype=dc.DTYPE), torch.zeros(n, hidden, dtype=dc.DTYPE)) for _ in range(layers)]


class AVPredictor:
    """All learnable networks. Discriminator parameters are prefixed
    ``dstd.`` / ``dseq.``; everything else belongs to the generator."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        self.cfg = cfg
        self.params = dc.ParamStore(seed)
        self._pe = torch.from_numpy(position_table(cfg.max_len, cfg.embed_dim))
        self._build()

    # -- construction -----------------------------------------------------

    def _conv(self, name, cin, cout, transpose=False, bias=True):
        fan_in = cin * 16
        std = math.sqrt(2.0 / ((1 + self.cfg.slope ** 2) * fan_in))
        shape = (cin, cout, 4, 4) if transpose else (cout, cin, 4, 4)
        self.params.normal(f"{name}.w", shape, std)
        if bias:
            self.params.zeros(f"{name}.b", (cout,))

    def _bn(self, name, c):
        self.params.ones(f"{name}.gamma", (c,))
        self.params.zeros(f"{name}.beta", (c,))
        self.params.zeros(f"{name}.mean", (c,), trainable=False)
        self.params.ones(f"{name}.var", (c,), trainable=False)

    def _linear(self, name, cin, cout):
        bound = 1.0 / math.sqrt(cin)
        self.params.uniform(f"{name}.w", (cout, cin), bound)
        self.params.uniform(f"{name}.b", (cout,), bound)

    def _lstm(self, name, cin, hidden):
        bound = 1.0 / math.sqrt(hidden)
        self.params.uniform(f"{name}.w_ih", (4 * hidden, cin), bound)
        self.params.uniform(f"{name}.w_hh", (4 * hidden, hidden), bound)
        b = self.params.uniform(f"{name}.b", (4 * hidden,), bound)
        with torch.no_grad():
            b[hidden:2 * hidden] += 1.0  # forget gate

    def _build(self):
        c = self.cfg
        p = self.params
        s = c.frame_size // 2 ** len(c.channels)
        cin = 1
        for i, ch in enumerate(c.channels):
            self._conv(f"enc.c{i}", cin, ch, bias=False)
            self._bn(f"enc.bn{i}", ch)
            cin = ch
        self._linear("enc.fc", c.channels[-1] * s * s, c.embed_dim)

        self._linear("dec.fc", c.hidden, c.channels[-1] * s * s)
        self._bn("dec.bn_in", c.channels[-1])
        outs = list(reversed(c.channels[:-1])) + [1]
        cin = c.channels[-1]
        for i, (skip_ch, cout) in enumerate(zip(reversed(c.channels), outs)):
            last = i == len(c.channels) - 1
            self._conv(f"dec.d{i}", cin + skip_ch, cout, transpose=True, bias=last)
            if not last:
                self._bn(f"dec.bn{i}", cout)
            cin = cout

        cin = c.embed_dim + c.z_dim
        for layer in range(c.pn_layers):
            self._lstm(f"pn.l{layer}", cin, c.hidden)
            cin = c.hidden

        ah, aw = c.audio_shape
        self._linear("audio.embed", ah * aw, c.embed_dim)
        d, hk = c.embed_dim, c.heads * c.d_k
        for stream in STREAMS:
            for layer in range(c.tf_layers):
                pre = f"tf.{stream}.l{layer}"
                for w in ("wq", "wk", "wv"):
                    p.normal(f"{pre}.{w}", (hk, d), 1.0 / math.sqrt(d))
                p.normal(f"{pre}.wh", (hk, d), 1.0 / math.sqrt(hk))
                self._linear(f"{pre}.ff1", d, c.ff_dim)
                self._linear(f"{pre}.ff2", c.ff_dim, d)

        for net in ("prior", "post"):
            self._lstm(f"{net}.lstm", 2 * c.embed_dim, c.hidden)
            self._linear(f"{net}.mu", c.hidden, c.z_dim)
            self._linear(f"{net}.lv", c.hidden, c.z_dim)

        sd = c.frame_size // 2 ** len(c.disc_channels)
        for net in ("dstd", "dseq"):
            cin = 1
            for i, ch in enumerate(c.disc_channels):
                self._conv(f"{net}.c{i}", cin, ch)
                cin = ch
        self._linear("dstd.fc", c.disc_channels[-1] * sd * sd, 1)
        self._linear("dseq.fc", c.disc_channels[-1] * sd * sd, c.disc_feat)
        self._linear("dseq.audio", ah * aw, c.disc_audio)
        self._lstm("dseq.lstm", c.disc_feat + c.disc_audio, c.disc_hidden)
        self._linear("dseq.out", c.disc_hidden, 1)

    def generator_params(self):
        return {k: v for k, v in self.params.trainable().items() if not k.startswith(DISC_PREFIXES)}

    def discriminator_params(self):
        return {k: v for k, v in self.params.trainable().items() if k.startswith(DISC_PREFIXES)}

    # -- frame encoder / decoder -----------------------------------------

    def _check_frames(self, frames):
        fs = self.cfg.frame_size
        if frames.dim() != 3 or tuple(frames.shape[1:]) != (fs, fs):
            raise ShapeError(f"frames must be (N, {fs}, {fs}), got {tuple(frames.shape)}")

    def encode_frame(self, frames: torch.Tensor, training: bool = False) -> FrameEmbedding:
        self._check_frames(frames)
        p, c = self.params, self.cfg
        h = frames.unsqueeze(1)
        skips = []
        for i in range(len(c.channels)):
            h = dc.conv2d(h, p[f"enc.c{i}.w"])
            h = dc.batch_norm2d(h, p[f"enc.bn{i}.gamma"], p[f"enc.bn{i}.beta"], p[f"enc.bn{i}.mean"],
                                p[f"enc.bn{i}.var"], training, c.bn_momentum)
            h = dc.leaky_relu(h, c.slope)
            skips.append(h)
        code = dc.tanh(dc.linear(h.flatten(1), p["enc.fc.w"], p["enc.fc.b"]))
        return FrameEmbedding(code, skips)

    def decode_frame(self, eta: torch.Tensor, skips: list[torch.Tensor], training: bool = False) -> torch.Tensor:
        p, c = self.params, self.cfg
        if skips is None or len(skips) != len(c.channels):
            raise ValueError(f"decoder needs {len(c.channels)} skip tensors, got {0 if skips is None else len(skips)}")
        s = c.frame_size // 2 ** len(c.channels)
        h = dc.linear(eta, p["dec.fc.w"], p["dec.fc.b"]).view(-1, c.channels[-1], s, s)
        h = dc.leaky_relu(dc.batch_norm2d(h, p["dec.bn_in.gamma"], p["dec.bn_in.beta"], p["dec.bn_in.mean"],
                                          p["dec.bn_in.var"], training, c.bn_momentum), c.slope)
        n = len(c.channels)
        for i, skip in enumerate(reversed(skips)):
            h = dc.conv_transpose2d(dc.concat([h, skip], dim=1), p[f"dec.d{i}.w"],
                                    p.entries.get(f"dec.d{i}.b"))
            if i < n - 1:
                h = dc.batch_norm2d(h, p[f"dec.bn{i}.gamma"], p[f"dec.bn{i}.beta"], p[f"dec.bn{i}.mean"],
                                    p[f"dec.bn{i}.var"], training, c.bn_momentum)
                h = dc.leaky_relu(h, c.slope)
        return dc.sigmoid(h).squeeze(1)

    # -- recurrent cores ---------------------------------------------------

    def init_pn_state(self, n: int):
        return _lstm_state(n, self.cfg.hidden, self.cfg.pn_layers)

    def init_latent_state(self, n: int):
        return _lstm_state(n, self.cfg.hidden, 1)

    def pn_step(self, inp: torch.Tensor, state):
        """Two-layer LSTM over ``[f(X_{t-1}), z_t]``; returns (eta, state)."""
        want = self.cfg.embed_dim + self.cfg.z_dim
        if inp.shape[-1] != want:
            raise ShapeError(f"prediction LSTM input dim is {inp.shape[-1]}, expected {want}")
        p = self.params
        new, x = [], inp
        for layer, (h, c) in enumerate(state):
            pre = f"pn.l{layer}"
            h, c = dc.lstm_cell(x, h, c, p[f"{pre}.w_ih"], p[f"{pre}.w_hh"], p[f"{pre}.b"])
            new.append((h, c))
            x = h
        return x, new

    def _latent_step(self, net: str, o_a, v, state):
        d = self.cfg.embed_dim
        if o_a.shape[-1] != d or v.shape[-1] != d:
            raise ShapeError(f"{net}: inputs must both be {d}-d, got {o_a.shape[-1]} and {v.shape[-1]}")
        p = self.params
        (h, c), = state
        h, c = dc.lstm_cell(dc.concat([o_a, v], dim=-1), h, c, p[f"{net}.lstm.w_ih"], p[f"{net}.lstm.w_hh"],
                            p[f"{net}.lstm.b"])
        g = LatentGaussian(dc.linear(h, p[f"{net}.mu.w"], p[f"{net}.mu.b"]),
                           dc.linear(h, p[f"{net}.lv.w"], p[f"{net}.lv.b"]))
        return g, [(h, c)]

    def prior_params(self, o_a, m_v, state):
        return self._latent_step("prior", o_a, m_v, state)

    def posterior_params(self, o_a, q_v, state):
        return self._latent_step("post", o_a, q_v, state)

    # -- transformers ------------------------------------------------------

    def with_positions(self, codes: torch.Tensor, start: int = 0) -> torch.Tensor:
        L = codes.shape[1]
        if start + L > self.cfg.max_len:
            raise ShapeError(f"sequence of length {start + L} exceeds max_len {self.cfg.max_len}")
        return dc.add(codes, self._pe[start:start + L])

    def transformer_encode(self, stream: str, seq: torch.Tensor, mask: torch.Tensor | None = None,
                           return_attention: bool = False):
        """Multi-head self-attention + feed-forward over ``seq`` (N, L, d).

        ``mask`` (L, L) bool marks the keys each query may see.
        """
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        if seq.dim() != 3 or seq.shape[1] == 0:
            raise ShapeError("transformer input must be a nonempty (N, L, d) sequence")
        c, p = self.cfg, self.params
        if seq.shape[-1] != c.embed_dim:
            raise ShapeError(f"transformer input dim is {seq.shape[-1]}, expected {c.embed_dim}")
        N, L, d = seq.shape
        x = seq
        attn = []
        for layer in range(c.tf_layers):
            pre = f"tf.{stream}.l{layer}"

            def heads(w):
                return dc.linear(x, p[f"{pre}.{w}"]).view(N, L, c.heads, c.d_k).transpose(1, 2)

            q, k, v = heads("wq"), heads("wk"), heads("wv")
            scores = dc.matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(c.d_k))
            a = dc.softmax(scores, dim=-1, mask=mask)
            attn.append(a)
            mixed = dc.matmul(a, v).transpose(1, 2).reshape(N, L, c.heads * c.d_k)
            out = dc.matmul(mixed, p[f"{pre}.wh"])
            x = dc.add(x, out) if c.residual else out
            if c.feedforward:
                ff = dc.linear(dc.leaky_relu(dc.linear(x, p[f"{pre}.ff1.w"], p[f"{pre}.ff1.b"]), c.slope),
                               p[f"{pre}.ff2.w"], p[f"{pre}.ff2.b"])
                x = dc.add(x, ff) if c.residual else ff
        return (x, attn) if return_attention else x

    def prefix_encodings(self, stream: str, seq: torch.Tensor) -> torch.Tensor:
        """Position ``i`` holds the last-position encoding of ``seq[:, :i+1]``.

        A single layer lets a causal mask do this in one pass; deeper stacks
        re-encode each prefix.
        """
        L = seq.shape[1]
        if self.cfg.tf_layers == 1:
            mask = torch.ones(L, L, dtype=torch.bool).tril()
            return self.transformer_encode(stream, seq, mask)
        return torch.stack([self.transformer_encode(stream, seq[:, :i + 1])[:, -1] for i in range(L)], dim=1)

    def audio_codes(self, blocks: torch.Tensor) -> torch.Tensor:
        """(N, T, d_HA, d_WA) STFT blocks -> (N, T, d) position-coded codes."""
        c = self.cfg
        if tuple(blocks.shape[2:]) != c.audio_shape:
            raise ShapeError(f"audio blocks must be {c.audio_shape}, got {tuple(blocks.shape[2:])}")
        flat = blocks.flatten(2) * c.audio_gain
        return self.with_positions(dc.linear(flat, self.params["audio.embed.w"], self.params["audio.embed.b"]))

    def audio_stream(self, blocks: torch.Tensor) -> torch.Tensor:
        """O^A for every frame index: position j encodes blocks up to j + k - 1."""
        T = blocks.shape[1]
        enc = self.prefix_encodings("audio", self.audio_codes(blocks))
        idx = [min(j + self.cfg.lookahead - 1, T - 1) for j in range(T)]
        return enc[:, idx]

    # -- generation --------------------------------------------------------

    def rollout(self, frames: torch.Tensor, blocks: torch.Tensor, seen: int, mode: str = "infer",
                z_source: str | None = None, length: int | None = None, noise: torch.Tensor | None = None,
                z: torch.Tensor | None = None, feed_generated: bool = False) -> RolloutResult:
        """Generate frames ``seen+1 .. length`` (1-based).

        ``train`` mode reads real frames into every transformer stream and
        (unless ``feed_generated``) into the prediction network; ``infer``
        mode feeds generated frames back. ``noise`` is (N, T, z_dim)
        standard normal; ``z`` supplies latents directly (z_source="given").
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        z_source = z_source or ("posterior" if mode == "train" else "prior")
        if z_source not in ("posterior", "prior", "given"):
            raise ValueError(f"unknown z_source {z_source!r}")
        T = length if length is not None else blocks.shape[1]
        F_ = seen
        if F_ > T:
            raise ValueError(f"seen frames ({F_}) exceed sequence length ({T})")
        if F_ < 1:
            raise ValueError("need at least one seen frame")
        if blocks.shape[1] < T:
            raise ShapeError(f"audio covers {blocks.shape[1]} frames, need {T}")
        training = mode == "train"
        need_frames = T if (training or z_source == "posterior") else F_
        if frames.shape[1] < need_frames:
            raise ShapeError(f"{mode} mode needs {need_frames} frames, got {frames.shape[1]}")
        N = frames.shape[0]
        fs = self.cfg.frame_size
        if F_ == T:
            return RolloutResult(torch.zeros(N, 0, fs, fs, dtype=dc.DTYPE))
        if z_source == "given":
            if z is None or z.shape[1] < T:
                raise ValueError("z_source='given' needs z of shape (N, T, z_dim)")
        elif noise is None:
            raise ValueError("noise (N, T, z_dim) is required")

        o_a = self.audio_stream(blocks[:, :T])
        n_real = need_frames
        real = self.encode_frame(frames[:, :n_real].reshape(N * n_real, fs, fs), training)
        real_codes = real.code.view(N, n_real, -1)
        # unbind once: per-step slicing would cost a full-size zero fill per step in backward
        code_steps = real_codes.unbind(1)
        skip_steps = list(zip(*[s.view(N, n_real, *s.shape[1:]).unbind(1) for s in real.skips]))
        if training or z_source == "posterior":
            pos_codes = self.with_positions(real_codes)
            if training:
                m_all = self.prefix_encodings("vprior", pos_codes).unbind(1)
            if z_source == "posterior":
                q_all = self.prefix_encodings("vpost", pos_codes).unbind(1)

        pn_state = self.init_pn_state(N)
        prior_state = self.init_latent_state(N)
        post_state = self.init_latent_state(N)
        codes = list(code_steps[:F_])
        o_steps = o_a.unbind(1)
        generated: dict[int, torch.Tensor] = {}
        gen_emb: dict[int, FrameEmbedding] = {}
        out = RolloutResult(None)
        frames_out = []
        for j in range(1, T):
            src = j - 1
            use_gen = src >= F_ and (not training or feed_generated)
            if use_gen:
                if src not in gen_emb:
                    gen_emb[src] = self.encode_frame(generated[src], training)
                code_in, skips_in = gen_emb[src].code, gen_emb[src].skips
            else:
                code_in, skips_in = code_steps[src], list(skip_steps[src])
            if training:
                m_v = m_all[j - 1]
            else:
                if len(codes) < j:
                    codes.append(gen_emb[src].code)
                prefix = self.with_positions(torch.stack(codes[:j], dim=1))
                m_v = self.transformer_encode("vprior", prefix)[:, -1]
            prior, prior_state = self.prior_params(o_steps[j], m_v, prior_state)
            post = None
            if z_source == "posterior":
                post, post_state = self.posterior_params(o_steps[j], q_all[j], post_state)
            if z_source == "given":
                z_t = z[:, j]
            elif z_source == "posterior":
                z_t = sample_latent(post, noise[:, j])
            else:
                z_t = sample_latent(prior, noise[:, j])
            eta, pn_state = self.pn_step(dc.concat([code_in, z_t], dim=-1), pn_state)
            if j >= F_:
                x_hat = self.decode_frame(eta, skips_in, training)
                generated[j] = x_hat
                frames_out.append(x_hat)
                out.priors.append(prior)
                if post is not None:
                    out.posteriors.append(post)
                out.z.append(z_t)
        out.frames = torch.stack(frames_out, dim=1)
        return out

    # -- discriminator -----------------------------------------------------

    def _disc_trunk(self, net: str, frames: torch.Tensor) -> torch.Tensor:
        p, c = self.params, self.cfg
        h = frames.unsqueeze(1)
        for i in range(len(c.disc_channels)):
            h = dc.leaky_relu(dc.conv2d(h, p[f"{net}.c{i}.w"], p[f"{net}.c{i}.b"]), c.slope)
        return h.flatten(1)

    def discriminate_std(self, frames: torch.Tensor) -> torch.Tensor:
        """Per-frame probability of being real, shape (N,)."""
        self._check_frames(frames)
        p = self.params
        return dc.sigmoid(dc.linear(self._disc_trunk("dstd", frames), p["dstd.fc.w"], p["dstd.fc.b"])).squeeze(-1)

    def disc_frame_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., H, W) -> (..., disc_feat)."""
        lead = frames.shape[:-2]
        flat = frames.reshape(-1, *frames.shape[-2:])
        self._check_frames(flat)
        p, c = self.params, self.cfg
        f = dc.leaky_relu(dc.linear(self._disc_trunk("dseq", flat), p["dseq.fc.w"], p["dseq.fc.b"]), c.slope)
        return f.view(*lead, -1)

    def disc_audio_features(self, blocks: torch.Tensor) -> torch.Tensor:
        c, p = self.cfg, self.params
        if tuple(blocks.shape[-2:]) != c.audio_shape:
            raise ShapeError(f"audio blocks must be {c.audio_shape}, got {tuple(blocks.shape[-2:])}")
        flat = blocks.flatten(-2) * c.audio_gain
        return dc.leaky_relu(dc.linear(flat, p["dseq.audio.w"], p["dseq.audio.b"]), c.slope)

    def judge(self, frame_feats: torch.Tensor, audio_feats: torch.Tensor) -> torch.Tensor:
        """Recurrent judge over (N, L, ·) per-step features -> (N,) probability."""
        p, c = self.params, self.cfg
        x = dc.concat([frame_feats, audio_feats], dim=-1)
        h, cc = _lstm_state(x.shape[0], c.disc_hidden, 1)[0]
        for t in range(x.shape[1]):
            h, cc = dc.lstm_cell(x[:, t], h, cc, p["dseq.lstm.w_ih"], p["dseq.lstm.w_hh"], p["dseq.lstm.b"])
        return dc.sigmoid(dc.linear(h, p["dseq.out.w"], p["dseq.out.b"])).squeeze(-1)

    def discriminate_seq(self, center: torch.Tensor, audio_blocks: torch.Tensor,
                         neighborhood: torch.Tensor) -> torch.Tensor:
        """Judge ``center`` against its R past (+ k-1 future) frames.

        ``neighborhood`` is (N, R+k-1, H, W), past frames first;
        ``audio_blocks`` is (N, R+k, d_HA, d_WA) in time order with the
        centre frame's block at index R.
        """
        R, k = self.cfg.history, self.cfg.lookahead
        if neighborhood.shape[1] != R + k - 1:
            raise ShapeError(f"neighborhood has {neighborhood.shape[1]} frames, expected R + k - 1 = {R + k - 1}")
        if audio_blocks.shape[1] != R + k:
            raise ShapeError(f"audio has {audio_blocks.shape[1]} blocks, expected R + k = {R + k}")
        seq = torch.cat([neighborhood[:, :R], center.unsqueeze(1), neighborhood[:, R:]], dim=1)
        return self.judge(self.disc_frame_features(seq), self.disc_audio_features(audio_blocks))


def param_count(model: AVPredictor) -> dict[str, int]:
    g = sum(v.numel() for v in model.generator_params().values())
    d = sum(v.numel() for v in model.discriminator_params().values())
    return {"generator": g, "discriminator": d}


def to_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=dc.DTYPE)
