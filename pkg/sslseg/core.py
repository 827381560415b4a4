"""
Tensor operations, reverse-mode differentiation and the Adam optimizer.

Tensors are torch tensors and the recording tape is torch's autograd graph;
the functions here add the shape contracts the rest of sslseg relies on
(odd same-padded kernels, even pooling extents, scalar losses) before handing
the work to torch.nn.functional.
"""
import logging
import os
import random

import numpy as np
import torch
import torch.nn.functional as F

core_logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
NORM_EPS = 1e-5

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_precision(precision="float32"):
    """Switch the global default floating point precision.

    Args:
        precision (str): "float32" for training, "float64" for gradient checks.

    Returns:
        torch.dtype: the previous default dtype, so callers can restore it.
    """
    if precision not in _DTYPES:
        raise ValueError(f"precision must be one of {list(_DTYPES)}, not {precision!r}")
    previous = torch.get_default_dtype()
    torch.set_default_dtype(_DTYPES[precision])
    return previous


def deterministic(seed=0):
    """ set random seeds and force deterministic torch kernels """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.backends.cudnn.benchmark = False
    torch.backends.cudnn.deterministic = True


def set_threads(n_threads=None):
    """Cap torch intra-op threads; reads SSLSEG_THREADS when n_threads is None."""
    if n_threads is None:
        n_threads = int(os.environ.get("SSLSEG_THREADS", "0") or 0)
    if n_threads > 0:
        torch.set_num_threads(n_threads)
    return torch.get_num_threads()


def _to_device(x, device=torch.device("cpu"), dtype=None):
    """
    Converts the input numpy array to a tensor on the specified device.

    Args:
        x (torch.Tensor or numpy.ndarray): The input tensor or numpy array.
        device (torch.device): The target device.
        dtype (torch.dtype, optional): Target dtype, the default dtype if None.

    Returns:
        torch.Tensor: The converted tensor on the specified device.
    """
    dtype = torch.get_default_dtype() if dtype is None else dtype
    if not isinstance(x, torch.Tensor):
        return torch.from_numpy(np.ascontiguousarray(x)).to(device, dtype=dtype)
    return x.to(device, dtype=dtype)


def _from_device(X):
    """
    Converts a tensor from the device to a NumPy array on the CPU.

    Args:
        X (torch.Tensor): The input tensor.

    Returns:
        numpy.ndarray: The converted NumPy array.
    """
    return X.detach().cpu().numpy()


def _check_ndim(name, x, ndim):
    if x.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}D, got shape {tuple(x.shape)}")


def _check_finite(name, y):
    # debug builds only (python -O strips this)
    assert torch.isfinite(y).all(), f"{name} produced non-finite values"
    return y


def conv2d(input, kernel, bias):
    """Same-padded, stride-1 2D convolution.

    Args:
        input (torch.Tensor): [B x Cin x H x W].
        kernel (torch.Tensor): [Cout x Cin x k x k], k odd.
        bias (torch.Tensor): [Cout].

    Returns:
        torch.Tensor: [B x Cout x H x W].
    """
    _check_ndim("conv2d input", input, 4)
    _check_ndim("conv2d kernel", kernel, 4)
    cout, cin, kh, kw = kernel.shape
    if input.shape[1] != cin:
        raise ValueError(f"conv2d shape mismatch: input has {input.shape[1]} channels "
                         f"but kernel {tuple(kernel.shape)} expects {cin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {tuple(bias.shape)} != ({cout},)")
    return _check_finite("conv2d", F.conv2d(input, kernel, bias, stride=1, padding=kh // 2))


def relu(input):
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    return torch.relu(input)


def max_pool2(input):
    """2x2 non-overlapping max pooling.

    The backward pass routes each window's gradient to its maximum; ties go to
    the first element of the window in row-major order.

    Args:
        input (torch.Tensor): [B x C x H x W] with H and W even.

    Returns:
        torch.Tensor: [B x C x H/2 x W/2].
    """
    _check_ndim("max_pool2 input", input, 4)
    B, C, H, W = input.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even H and W, got {H}x{W}")
    windows = input.reshape(B, C, H // 2, 2, W // 2, 2).permute(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(B, C, H // 2, W // 2, 4)
    return windows.max(dim=-1).values


def upsample_nearest2(input):
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 block."""
    _check_ndim("upsample_nearest2 input", input, 4)
    return F.interpolate(input, scale_factor=2, mode="nearest")


def avg_pool2(input):
    """2x2 non-overlapping average pooling."""
    _check_ndim("avg_pool2 input", input, 4)
    return F.avg_pool2d(input, 2)


def instance_norm(input, gain, shift):
    """Per-(sample, channel) normalization followed by a per-channel affine map.

    Args:
        input (torch.Tensor): [B x C x H x W] with H*W >= 2.
        gain (torch.Tensor): [C].
        shift (torch.Tensor): [C].

    Returns:
        torch.Tensor: same shape as input.
    """
    _check_ndim("instance_norm input", input, 4)
    C = input.shape[1]
    if input.shape[2] * input.shape[3] < 2:
        raise ValueError(f"instance_norm needs H*W >= 2, got {tuple(input.shape[2:])}")
    if gain.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"instance_norm gain/shift must have shape ({C},), got "
                         f"{tuple(gain.shape)} and {tuple(shift.shape)}")
    return _check_finite("instance_norm",
                         F.instance_norm(input, weight=gain, bias=shift, eps=NORM_EPS))


def linear(input, weight, bias):
    """Affine map [B x F] -> [B x G] with weight [G x F] and bias [G]."""
    _check_ndim("linear input", input, 2)
    _check_ndim("linear weight", weight, 2)
    if input.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {tuple(input.shape)} vs "
                         f"weight {tuple(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(input, weight, bias)


def l2_normalize(x, dim=1):
    """Scale vectors along dim to unit L2 norm."""
    return F.normalize(x, p=2.0, dim=dim, eps=1e-12)


def backward(loss, inputs=None):
    """Run the reverse pass from a scalar loss.

    Args:
        loss (torch.Tensor): scalar tensor produced by recorded ops.
        inputs (list of torch.Tensor, optional): if given, their gradients are
            returned instead of being accumulated into ``.grad``.

    Returns:
        tuple of torch.Tensor or None
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    if inputs is not None:
        return torch.autograd.grad(loss.reshape(()), list(inputs), allow_unused=True)
    loss.reshape(()).backward()
    return None


def make_optimizer(parameters, learning_rate=1e-3):
    """Adam with beta1=0.9, beta2=0.999, eps=1e-8."""
    return torch.optim.Adam(parameters, lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def set_learning_rate(optimizer, learning_rate):
    for param_group in optimizer.param_groups:
        param_group["lr"] = learning_rate


def adam_step(optimizer):
    """Apply one bias-corrected Adam update to every parameter with a gradient.

    Moment buffers restored from elsewhere must match their parameters.

    Args:
        optimizer (torch.optim.Adam): optimizer built by make_optimizer.

    Returns:
        int: the step counter of the first updated parameter after the update.
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state and state[key].shape != p.shape:
                    error_message = (f"Adam state {key} shape {tuple(state[key].shape)} "
                                     f"does not match parameter shape {tuple(p.shape)}")
                    core_logger.critical(error_message)
                    raise ValueError(error_message)
    optimizer.step()
    for group in optimizer.param_groups:
        for p in group["params"]:
            if "step" in optimizer.state.get(p, {}):
                return int(optimizer.state[p]["step"])
    return 0
