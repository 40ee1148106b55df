"""Per-pixel compositing kernels with an analytic backward pass.

Inputs are depth-sorted splats: 2D means (pixels), conics (inverse 2D
covariance entries a, b, c), effective opacities and colors. Pixel centres
sit at (col + 0.5, row + 0.5). The loops are serial so the per-Gaussian
gradient reduction is deterministic.
"""

import numba
import numpy as np
import torch

ALPHA_MAX = 0.999
T_MIN = 1e-4
# exp(-40) ~ 4e-18: pairs beyond this exponent are skipped.
POWER_MIN = -40.0


@numba.njit(cache=True, nogil=True)
def _forward(mean2d, conic, opacity, color, bg, height, width):
    n = mean2d.shape[0]
    image = np.empty((height, width, 3), dtype=mean2d.dtype)
    trans = np.empty((height, width), dtype=mean2d.dtype)
    n_used = np.zeros((height, width), dtype=np.int64)
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            t = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            last = 0
            for i in range(n):
                if t < T_MIN:
                    break
                last = i + 1
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                if power < POWER_MIN:
                    continue
                alpha = opacity[i] * np.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                wgt = alpha * t
                r += color[i, 0] * wgt
                g += color[i, 1] * wgt
                b += color[i, 2] * wgt
                t *= 1.0 - alpha
            image[row, col, 0] = r + t * bg[0]
            image[row, col, 1] = g + t * bg[1]
            image[row, col, 2] = b + t * bg[2]
            trans[row, col] = t
            n_used[row, col] = last
    return image, trans, n_used


@numba.njit(cache=True, nogil=True)
def _backward(mean2d, conic, opacity, color, bg, trans, n_used, grad_image):
    n = mean2d.shape[0]
    height, width = trans.shape
    g_mean = np.zeros_like(mean2d)
    g_conic = np.zeros_like(conic)
    g_op = np.zeros_like(opacity)
    g_col = np.zeros_like(color)
    g_bg = np.zeros(3, dtype=mean2d.dtype)
    alphas = np.empty(n, dtype=mean2d.dtype)
    ts = np.empty(n, dtype=mean2d.dtype)
    ws = np.empty(n, dtype=mean2d.dtype)
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            gr = grad_image[row, col, 0]
            gg = grad_image[row, col, 1]
            gb = grad_image[row, col, 2]
            t_end = trans[row, col]
            g_bg[0] += gr * t_end
            g_bg[1] += gg * t_end
            g_bg[2] += gb * t_end
            if gr == 0.0 and gg == 0.0 and gb == 0.0:
                continue
            last = n_used[row, col]
            # replay the forward pass for this pixel
            t = 1.0
            for i in range(last):
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                ts[i] = t
                if power < POWER_MIN:
                    alphas[i] = 0.0
                    ws[i] = -1.0
                    continue
                w = np.exp(power)
                alpha = opacity[i] * w
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                    ws[i] = -1.0  # clamped: no gradient through alpha
                else:
                    ws[i] = w
                alphas[i] = alpha
                t *= 1.0 - alpha
            # back to front; s = G . (light arriving from behind splat i)
            s = (gr * bg[0] + gg * bg[1] + gb * bg[2]) * t_end
            for i in range(last - 1, -1, -1):
                alpha = alphas[i]
                if alpha == 0.0 and ws[i] < 0.0:
                    continue
                ti = ts[i]
                gc = gr * color[i, 0] + gg * color[i, 1] + gb * color[i, 2]
                wgt = alpha * ti
                g_col[i, 0] += gr * wgt
                g_col[i, 1] += gg * wgt
                g_col[i, 2] += gb * wgt
                d_alpha = ti * gc - s / (1.0 - alpha)
                s += gc * wgt
                w = ws[i]
                if w < 0.0:
                    continue
                g_op[i] += d_alpha * w
                d_power = d_alpha * opacity[i] * w
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                g_mean[i, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                g_mean[i, 1] += d_power * (conic[i, 2] * dy + conic[i, 1] * dx)
                g_conic[i, 0] += -0.5 * d_power * dx * dx
                g_conic[i, 1] += -d_power * dx * dy
                g_conic[i, 2] += -0.5 * d_power * dy * dy
    return g_mean, g_conic, g_op, g_col, g_bg


class Composite(torch.autograd.Function):
    """(mean2d, conic, opacity, color, bg) -> (image H x W x 3, transmittance H x W)."""

    @staticmethod
    def forward(ctx, mean2d, conic, opacity, color, bg, height, width):
        args = [x.detach().contiguous().numpy() for x in (mean2d, conic, opacity, color, bg)]
        image, trans, n_used = _forward(*args, height, width)
        ctx.save_for_backward(mean2d, conic, opacity, color, bg)
        ctx.trans = trans
        ctx.n_used = n_used
        return torch.from_numpy(image), torch.from_numpy(trans)

    @staticmethod
    def backward(ctx, grad_image, grad_trans):
        mean2d, conic, opacity, color, bg = ctx.saved_tensors
        if grad_trans is not None and bool(grad_trans.any()):
            raise NotImplementedError("transmittance is not differentiable")
        args = [x.detach().contiguous().numpy() for x in (mean2d, conic, opacity, color, bg)]
        grads = _backward(*args, ctx.trans, ctx.n_used,
                          grad_image.detach().to(mean2d.dtype).contiguous().numpy())
        return tuple(torch.from_numpy(g) for g in grads) + (None, None)


def composite(mean2d, conic, opacity, color, bg, height: int, width: int):
    return Composite.apply(mean2d, conic, opacity, color, bg, height, width)
