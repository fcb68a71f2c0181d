import torch
import torch.nn.functional as F


class NonFiniteLoss(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


def nce_loss(z1, z2, tau=0.2):
    """Per-pair contrastive losses for B positive pairs (z1[i], z2[i]).

    Each anchor is scored against every patch of the other view with cosine
    similarity / tau; its own partner is the positive and the other pairs'
    patches are the negatives. Both view directions are averaged.
    """
    if z1.shape[0] < 2:
        raise ValueError(f"contrastive loss needs at least 2 pairs, got {z1.shape[0]}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = F.normalize(z1, dim=1)
    b = F.normalize(z2, dim=1)
    logits = a @ b.t() / tau
    pos = logits.diagonal()
    l12 = torch.logsumexp(logits, dim=1) - pos
    l21 = torch.logsumexp(logits, dim=0) - pos
    return 0.5 * (l12 + l21)


def kld(z_mean, logvar):
    """KL(N(z_mean, sigma^2) || N(0, I)) per sample."""
    return -0.5 * torch.sum(1 + logvar - z_mean.pow(2) - logvar.exp(), dim=1)


def modulated_batch_loss(z, z_mean, logvar, recon, target, weights=None, tau=0.2,
                         lambda_contrastive=1.0, lambda_recon=1.0, lambda_kld=0.1):
    """Total loss for a batch of 2B patches laid out as [first views; second views].

    ``weights`` holds one modulation weight per pair (``None`` = no
    modulation); they are constants, no gradient flows through them.
    Returns ``(total, parts)`` where parts holds detached scalar components.
    """
    n = z.shape[0] // 2
    per_pair = nce_loss(z[:n], z[n:], tau)
    if weights is None:
        contrastive = per_pair.mean()
    else:
        weights = torch.as_tensor(weights, dtype=per_pair.dtype).detach()
        contrastive = (weights * per_pair).mean()
    rec = F.mse_loss(recon, target)
    kl = kld(z_mean, logvar).mean()
    total = lambda_contrastive * contrastive + lambda_recon * rec + lambda_kld * kl
    parts = {
        "total": total.item(),
        "contrastive": contrastive.item(),
        "nce": per_pair.mean().item(),
        "recon": rec.item(),
        "kld": kl.item(),
    }
    if not all(torch.isfinite(torch.tensor(v)) for v in parts.values()):
        raise NonFiniteLoss(f"non-finite loss: {parts}", dump={
            "parts": parts, "z_mean": z_mean.detach(), "logvar": logvar.detach(),
            "target": target.detach(), "weights": None if weights is None else weights.detach(),
        })
    return total, parts
