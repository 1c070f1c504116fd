"""PACNN network: shared backbone, three density heads, perspective branch and PA fusion."""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from loguru import logger

from .config import ModelConfig
from .exceptions import FormatError, ShapeError, StateError
from .gt_maps import NETWORK_STRIDE, ValueMap
from .nn.layers import Activation, Conv2d, Layer, MaxPool2x2, Sequential, Upsample2x
from .nn.tensor import LayerParam
from .weighting import PAWeighting, PAWeightParams, combine_average

CombineMode = Literal["pa", "average"]
OUTPUT_NAMES = ("d_e", "d_e1", "d_e2", "d_e3", "p_e", "p_es")


@dataclass
class MultiScaleOutputs:
    """All maps of one forward pass (2D, padded-input resolution / factor)."""

    d_e1: ValueMap
    d_e2: ValueMap
    d_e3: ValueMap
    p_es: ValueMap
    p_e: ValueMap
    w_s: ValueMap
    w: ValueMap
    d_es: ValueMap
    d_e: ValueMap
    mode: str = "pa"
    input_size: tuple[int, int] = (0, 0)

    def density(self, output: str = "d_e") -> ValueMap:
        if output not in ("d_e", "d_e1", "d_e2", "d_e3", "d_es"):
            raise ShapeError(f"Unknown density output: {output}")
        return getattr(self, output)


@dataclass
class ModelParams:
    """Snapshot of parameter values keyed by id, plus scalar metadata records."""

    arrays: dict[str, np.ndarray]
    meta: dict[str, float] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, dict(self.meta))

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def pad_to_stride(image: np.ndarray, stride: int = NETWORK_STRIDE) -> np.ndarray:
    """Zero-pad an image on the bottom and right to a multiple of stride."""
    _, h, w = image.shape
    ph, pw = -(-h // stride) * stride, -(-w // stride) * stride
    if (ph, pw) == (h, w):
        return image
    return np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)))


class PACNN:
    """Perspective-aware multi-scale density regressor.

    Backbone blocks 1-3 end at 1/8 resolution (head D1); block 4 pools to
    1/16 (head D2); stage 5 pools to 1/32 (head D3). The perspective branch
    reads the 1/16 pooled features and yields P_s, which a deconv lifts to P
    at 1/8. Two PA layers fuse D3 into D2 and the result into D1.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        """Build all layers with seeded initialization."""
        self.config = config or ModelConfig()
        self.logger = logger.bind(name="PACNN")
        rng = np.random.default_rng(seed)
        dt = self.config.dtype
        act = self.config.activation
        w1, w2, w3, w4 = self.config.widths
        pw1, pw2 = self.config.perspective_widths
        cin = self.config.in_channels

        def conv(name: str, cin: int, cout: int, k: int = 3, bias_init: float = 0.0) -> Conv2d:
            return Conv2d(name, cin, cout, k, rng=rng, dtype=dt, bias_init=bias_init)

        self.block1 = Sequential(
            "block1", [conv("conv1_1", cin, w1), Activation("act1_1", act), conv("conv1_2", w1, w1),
                       Activation("act1_2", act), MaxPool2x2("pool1")]
        )  # fmt: skip
        self.block2 = Sequential(
            "block2", [conv("conv2_1", w1, w2), Activation("act2_1", act), conv("conv2_2", w2, w2),
                       Activation("act2_2", act), MaxPool2x2("pool2")]
        )  # fmt: skip
        self.block3 = Sequential(
            "block3", [conv("conv3_1", w2, w3), Activation("act3_1", act), conv("conv3_2", w3, w3),
                       Activation("act3_2", act), conv("conv3_3", w3, w3), Activation("act3_3", act),
                       MaxPool2x2("pool3")]
        )  # fmt: skip
        self.pool4 = MaxPool2x2("pool4")
        self.block4 = Sequential(
            "block4", [conv("conv4_1", w3, w4), Activation("act4_1", act), conv("conv4_2", w4, w4),
                       Activation("act4_2", act)]
        )  # fmt: skip
        self.stage5 = Sequential(
            "stage5", [MaxPool2x2("pool5"), conv("conv5_1", w4, w4), Activation("act5_1", act)]
        )

        # positive bias keeps the rectified heads active at initialization
        self.head1 = Sequential("head1", [conv("head1", w3, 1, 1, bias_init=0.1), Activation("rect1", act)])
        self.head2 = Sequential("head2", [conv("head2", w4, 1, 1, bias_init=0.1), Activation("rect2", act)])
        self.head3 = Sequential("head3", [conv("head3", w4, 1, 1, bias_init=0.1), Activation("rect3", act)])

        self.perspective = Sequential(
            "perspective", [conv("convp_1", w3, pw1), Activation("actp_1", act), conv("convp_2", pw1, pw2),
                            Activation("actp_2", act), conv("convp_3", pw2, 1)]
        )  # fmt: skip
        self.up_perspective = Upsample2x("up_p", gain=1.0, dtype=dt)

        # separate upsamplers per use-site; density ones start mass preserving
        self.up_avg3 = Upsample2x("up_avg3", gain=0.25, dtype=dt)
        self.up_avg2 = Upsample2x("up_avg2", gain=0.25, dtype=dt)
        self.up_pa3 = Upsample2x("up_pa3", gain=0.25, dtype=dt)
        self.up_pa2 = Upsample2x("up_pa2", gain=0.25, dtype=dt)
        self.pa_inner = PAWeighting("pa_inner", dtype=dt)
        self.pa_outer = PAWeighting("pa_outer", dtype=dt)

        self._mode: str | None = None
        self._padded_shape: tuple[int, ...] | None = None
        self.logger.info(f"Built PACNN with {self.n_params} parameters ({dt}, {act})")

    # ------------------------------------------------------------------ parameters

    @property
    def layers(self) -> list[Layer]:
        return [
            self.block1, self.block2, self.block3, self.block4, self.stage5,
            self.head1, self.head2, self.head3, self.perspective, self.up_perspective,
            self.up_avg3, self.up_avg2, self.up_pa3, self.up_pa2, self.pa_inner, self.pa_outer,
        ]  # fmt: skip

    @property
    def backbone_layers(self) -> list[Layer]:
        return [self.block1, self.block2, self.block3, self.block4, self.stage5]

    def parameters(self) -> list[LayerParam]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def n_params(self) -> int:
        return sum(p.tensor.size for p in self.parameters())

    @property
    def n_backbone_params(self) -> int:
        return sum(p.tensor.size for layer in self.backbone_layers for p in layer.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.tensor.zero_grad()

    def set_backbone_trainable(self, trainable: bool) -> None:
        for layer in self.backbone_layers:
            for param in layer.parameters():
                param.learnable = trainable

    def set_pa_params(self, inner: PAWeightParams, outer: PAWeightParams) -> None:
        self.pa_inner.set_params(inner)
        self.pa_outer.set_params(outer)

    def state(self) -> ModelParams:
        return ModelParams({p.id: p.values.copy() for p in self.parameters()})

    def load_state(self, params: ModelParams) -> None:
        """Load parameter values; ids and shapes must match this architecture."""
        own = {p.id: p for p in self.parameters()}
        missing = sorted(set(own) - set(params.arrays))
        unknown = sorted(set(params.arrays) - set(own))
        if missing or unknown:
            raise FormatError(f"Checkpoint does not match the model: missing={missing[:5]} unknown={unknown[:5]}")
        for pid, param in own.items():
            if params.arrays[pid].shape != param.tensor.shape:
                raise ShapeError(f"{pid}: checkpoint shape {params.arrays[pid].shape} != {param.tensor.shape}")
            param.values = params.arrays[pid]

    # ------------------------------------------------------------------ forward / backward

    def _prepare(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=self.config.dtype)
        if image.ndim == 2:
            image = image[None]
        if image.shape[0] != self.config.in_channels:
            raise ShapeError(f"Expected {self.config.in_channels} channels, got image shape {image.shape}")
        if image.shape[1] % NETWORK_STRIDE or image.shape[2] % NETWORK_STRIDE:
            if not self.config.pad_input:
                raise ShapeError(f"Image size {image.shape[1:]} is not divisible by {NETWORK_STRIDE}")
            image = pad_to_stride(image)
        return image

    def forward(self, image: np.ndarray, mode: CombineMode = "pa", cache: bool = True) -> MultiScaleOutputs:
        """Run the network on one (C, H, W) image.

        ``cache=False`` runs without touching layer state (thread-safe inference).
        """
        if mode not in ("pa", "average"):
            raise ShapeError(f"Unknown combination mode: {mode}")
        x = self._prepare(image)

        f8 = self.block3.forward(self.block2.forward(self.block1.forward(x, cache), cache), cache)
        f16_in = self.pool4.forward(f8, cache)
        f16 = self.block4.forward(f16_in, cache)
        f32 = self.stage5.forward(f16, cache)

        d_e1 = self.head1.forward(f8, cache)
        d_e2 = self.head2.forward(f16, cache)
        d_e3 = self.head3.forward(f32, cache)
        p_es = self.perspective.forward(f16_in, cache)
        p_e = self.up_perspective.forward(p_es, cache)

        if mode == "pa":
            coarse3 = self.up_pa3.forward(d_e3, cache)
            if cache:
                d_es = self.pa_inner.forward((d_e2, coarse3, p_es))
                w_s = self.pa_inner.last_weights
                coarse2 = self.up_pa2.forward(d_es)
                d_e = self.pa_outer.forward((d_e1, coarse2, p_e))
                w = self.pa_outer.last_weights
            else:
                d_es, w_s = self.pa_inner.combine(d_e2, coarse3, p_es)
                d_e, w = self.pa_outer.combine(d_e1, self.up_pa2.forward(d_es, cache=False), p_e)
        else:
            d_es, d_e = combine_average(
                d_e1, d_e2, d_e3,
                upsampler=lambda m: self.up_avg2.forward(m, cache),
                inner_upsampler=lambda m: self.up_avg3.forward(m, cache),
                return_middle=True,
            )  # fmt: skip
            w_s = np.full(d_es.shape, 0.5)
            w = np.full(d_e.shape, 0.5)

        if cache:
            self._mode = mode
            self._padded_shape = x.shape

        return MultiScaleOutputs(
            d_e1=ValueMap(d_e1[0]),
            d_e2=ValueMap(d_e2[0]),
            d_e3=ValueMap(d_e3[0]),
            p_es=ValueMap(p_es[0]),
            p_e=ValueMap(p_e[0]),
            w_s=ValueMap(np.asarray(w_s).reshape(d_es.shape)[0]),
            w=ValueMap(np.asarray(w).reshape(d_e.shape)[0]),
            d_es=ValueMap(d_es[0]),
            d_e=ValueMap(d_e[0]),
            mode=mode,
            input_size=(int(x.shape[2]), int(x.shape[1])),
        )

    def backward(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Backpropagate gradients w.r.t. any of the named outputs; returns the image gradient."""
        if self._mode is None:
            raise StateError("backward called before a caching forward pass")
        unknown = set(grads) - set(OUTPUT_NAMES)
        if unknown:
            raise ShapeError(f"No gradient path for outputs {sorted(unknown)}")

        def grad_of(name: str) -> np.ndarray | None:
            g = grads.get(name)
            return None if g is None else np.asarray(g, dtype=np.float64)[None]

        g_d1 = grad_of("d_e1")
        g_d2 = grad_of("d_e2")
        g_d3 = grad_of("d_e3")
        g_pe = grad_of("p_e")
        g_pes = grad_of("p_es")
        g_de = grad_of("d_e")

        def add(a: np.ndarray | None, b: np.ndarray) -> np.ndarray:
            return b if a is None else a + b

        if g_de is not None:
            if self._mode == "pa":
                outer = self.pa_outer.backward(g_de)
                g_d1 = add(g_d1, outer.d_fine)
                g_pe = add(g_pe, outer.p)
                inner = self.pa_inner.backward(self.up_pa2.backward(outer.d_coarse_up))
                g_d2 = add(g_d2, inner.d_fine)
                g_pes = add(g_pes, inner.p)
                g_d3 = add(g_d3, self.up_pa3.backward(inner.d_coarse_up))
            else:
                g_d1 = add(g_d1, 0.5 * g_de)
                g_middle = self.up_avg2.backward(0.5 * g_de)
                g_d2 = add(g_d2, 0.5 * g_middle)
                g_d3 = add(g_d3, self.up_avg3.backward(0.5 * g_middle))

        if g_pe is not None:
            g_pes = add(g_pes, self.up_perspective.backward(g_pe))

        _, h, w = self._padded_shape
        zeros8 = np.zeros((self.config.widths[2], h // 8, w // 8))
        zeros16 = np.zeros((self.config.widths[3], h // 16, w // 16))

        g_f16 = zeros16.copy()
        if g_d3 is not None:
            g_f16 = g_f16 + self.stage5.backward(self.head3.backward(g_d3))
        if g_d2 is not None:
            g_f16 = g_f16 + self.head2.backward(g_d2)

        g_f16_in = self.block4.backward(g_f16)
        if g_pes is not None:
            g_f16_in = g_f16_in + self.perspective.backward(g_pes)

        g_f8 = zeros8 + self.pool4.backward(g_f16_in)
        if g_d1 is not None:
            g_f8 = g_f8 + self.head1.backward(g_d1)

        return self.block1.backward(self.block2.backward(self.block3.backward(g_f8)))
