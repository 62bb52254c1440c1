"""Utility of a privatized corpus: k-fold accuracy of an attribute classifier."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
from sklearn.model_selection import StratifiedKFold

from .data import stack_images
from .errors import ConfigurationError, StratificationError
from .metrics import fmt6, privatize_images, ssim_batch
from .training import derive_seed


class ClassifierKind(str, enum.Enum):
    SMALL_CNN = "SMALL_CNN"
    PRETRAINED_FINETUNE = "PRETRAINED_FINETUNE"
    MAJORITY = "MAJORITY"  # sanity baseline


@dataclass
class UtilityConfig:
    folds: int = 4
    classifier: ClassifierKind = ClassifierKind.SMALL_CNN
    epochs: int = 20
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    pretrained_path: str | None = None

    def __post_init__(self):
        self.classifier = ClassifierKind(self.classifier)
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.classifier is ClassifierKind.PRETRAINED_FINETUNE and not self.pretrained_path:
            raise ConfigurationError("PRETRAINED_FINETUNE needs pretrained_path")

    def to_dict(self):
        return {"folds": self.folds, "classifier": self.classifier.value, "epochs": self.epochs,
                "seed": self.seed, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "pretrained_path": self.pretrained_path}


@dataclass
class UtilityReport:
    lam: float | None
    accuracy_mean: float
    accuracy_std: float
    per_fold: list = field(default_factory=list)
    baseline_accuracy_mean: float | None = None

    def row(self):
        base = self.baseline_accuracy_mean
        return {
            "lambda": "" if self.lam is None else fmt6(self.lam),
            "accuracy_mean": fmt6(self.accuracy_mean),
            "accuracy_std": fmt6(self.accuracy_std),
            "baseline_accuracy_mean": "" if base is None else fmt6(base),
        }


class SmallCNN(nn.Module):
    """Three conv / max-pool / ReLU blocks and a linear read-out."""

    def __init__(self, in_channels, image_size, num_classes, widths=(8, 16, 32)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=1, padding=1), nn.MaxPool2d(2), nn.ReLU()]
            c = w
        self.features = nn.Sequential(*layers)
        side = image_size // 2 ** len(widths)
        self.classifier = nn.Linear(c * side * side, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


def _pretrained(in_channels, num_classes, path):
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    state = torch.load(path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)
    if in_channels != 3:
        w = net.conv1.weight.data.mean(dim=1, keepdim=True).repeat(1, in_channels, 1, 1)
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        net.conv1.weight.data.copy_(w)
    net.fc = nn.Linear(net.fc.in_features, num_classes)
    return net


def make_folds(labels, k, seed):
    """Stratified fold assignment; raises if some class cannot reach every fold."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    short = classes[counts < k]
    if len(short):
        raise StratificationError(f"classes {short.tolist()} have fewer than {k} samples; some fold would miss them")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % 2**32)
    return [test for _, test in skf.split(np.zeros(len(labels)), labels)]


def _fit_predict(cfg, x_train, y_train, x_test, num_classes, fold):
    if cfg.classifier is ClassifierKind.MAJORITY:
        majority = np.bincount(y_train, minlength=num_classes).argmax()
        return np.full(len(x_test), majority)
    seed = derive_seed(cfg.seed, fold, 7)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if cfg.classifier is ClassifierKind.SMALL_CNN:
            net = SmallCNN(x_train.shape[1], x_train.shape[-1], num_classes)
        else:
            net = _pretrained(x_train.shape[1], num_classes, cfg.pretrained_path)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
        xt = torch.as_tensor(x_train)
        yt = torch.as_tensor(y_train, dtype=torch.long)
        g = torch.Generator().manual_seed(seed)
        net.train()
        for _ in range(cfg.epochs):
            perm = torch.randperm(len(xt), generator=g)
            for start in range(0, len(xt), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                loss = nn.functional.cross_entropy(net(xt[idx]), yt[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        net.eval()
        with torch.no_grad():
            return net(torch.as_tensor(x_test)).argmax(dim=1).numpy()


def proxy_accuracy(corpus, cfg: UtilityConfig, lam=None) -> UtilityReport:
    """Stratified k-fold accuracy of a classifier trained from scratch per fold."""
    x = stack_images(corpus)
    y = np.array([r.attribute_id for r in corpus], dtype=np.int64)
    num_classes = int(y.max()) + 1
    folds = make_folds(y, cfg.folds, cfg.seed)
    accs = []
    for f, test in enumerate(folds):
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test] = False
        pred = _fit_predict(cfg, x[train_mask], y[train_mask], x[test], num_classes, f)
        accs.append(float(np.mean(pred == y[test])))
    return UtilityReport(lam=lam, accuracy_mean=float(np.mean(accs)), accuracy_std=float(np.std(accs)),
                         per_fold=accs)


def privatize_corpus(model, corpus, seed=0):
    """Run every image through the EVAL-mode generator; labels carry through."""
    gen, _ = model.build()
    images = stack_images(corpus)
    if tuple(images.shape[1:]) != (gen.cfg.input_channels, gen.cfg.input_size, gen.cfg.input_size):
        raise ConfigurationError(f"corpus images {images.shape[1:]} do not match generator input")
    priv = privatize_images(gen, images, seed)
    return [replace(rec, image=p.transpose(1, 2, 0).astype(np.float32)) for rec, p in zip(corpus, priv)]


def corpus_distortions(original, privatized):
    """Per-image 1 - SSIM between matching records."""
    a = torch.as_tensor(stack_images(original), dtype=torch.float64)
    b = torch.as_tensor(stack_images(privatized), dtype=torch.float64)
    return (1.0 - ssim_batch(a, b)).numpy()


def utility_report(original, privatized, cfg: UtilityConfig, lam=None, baseline=None):
    """Proxy accuracy on the privatized corpus alongside the unprivatized baseline."""
    rep = proxy_accuracy(privatized, cfg, lam=lam)
    if baseline is None:
        baseline = proxy_accuracy(original, cfg).accuracy_mean
    rep.baseline_accuracy_mean = float(baseline)
    return rep
