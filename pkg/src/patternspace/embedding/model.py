import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_DIM = 100


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    """ResNet-18 layout for 32x32 inputs: 3x3 stride-1 stem, no max-pool,
    four stages of two basic blocks, global average pooling, one linear head
    emitting (z_mean, log-variance).

    ``width`` is the channel count of the first stage (64 in the standard
    network); later stages double it.
    """

    def __init__(self, in_channels=2, width=64, latent_dim=LATENT_DIM):
        super().__init__()
        self.latent_dim = latent_dim
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages = []
        c = width
        for i, out_c in enumerate([width, 2 * width, 4 * width, 8 * width]):
            stride = 1 if i == 0 else 2
            stages += [BasicBlock(c, out_c, stride), BasicBlock(out_c, out_c, 1)]
            c = out_c
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c, 2 * latent_dim)

    def forward(self, x):
        h = self.pool(self.stages(self.stem(x))).flatten(1)
        out = self.fc(h)
        return out[:, :self.latent_dim], out[:, self.latent_dim:]


class Decoder(nn.Module):
    """Two linear layers then four stride-2 transposed convolutions (2 -> 32 px)."""

    def __init__(self, out_channels=2, width=64, latent_dim=LATENT_DIM, hidden=256):
        super().__init__()
        c = 8 * width
        self.c = c
        self.fc = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, c * 2 * 2),
            nn.ReLU(inplace=True),
        )
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1),
            nn.BatchNorm2d(c // 2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c // 2, c // 4, 4, stride=2, padding=1),
            nn.BatchNorm2d(c // 4),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c // 4, c // 8, 4, stride=2, padding=1),
            nn.BatchNorm2d(c // 8),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c // 8, out_channels, 4, stride=2, padding=1),
            nn.Tanh(),  # gradient inputs live in [-1, 1]
        )

    def forward(self, z):
        return self.deconv(self.fc(z).view(-1, self.c, 2, 2))


class PatternVAE(nn.Module):
    def __init__(self, width=64, latent_dim=LATENT_DIM, in_channels=2):
        super().__init__()
        self.encoder = Encoder(in_channels, width, latent_dim)
        self.decoder = Decoder(in_channels, width, latent_dim)

    def forward(self, x, generator=None):
        z_mean, logvar = self.encoder(x)
        z = reparameterize(z_mean, logvar, generator)
        return z_mean, logvar, z, self.decoder(z)


def reparameterize(z_mean, logvar, generator=None):
    std = torch.exp(0.5 * logvar)
    eps = torch.randn(z_mean.shape, generator=generator, dtype=z_mean.dtype, device=z_mean.device)
    return z_mean + std * eps
