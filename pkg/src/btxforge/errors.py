"""
Exceptions BTXForge.

Chaque exception porte le code de sortie CLI associé:
    1: validation (configuration, données)
    2: erreur d'exécution
    3: divergence de l'entraînement
"""

from typing import List, Optional


class BtxForgeError(Exception):
    """Erreur de base du laboratoire."""

    exit_code: int = 2


# === Validation (code 1) ===

class ConfigValidationError(BtxForgeError):
    """Configuration invalide."""

    exit_code = 1

    def __init__(self, messages: List[str]):
        self.messages = messages
        super().__init__("; ".join(messages))


class DataValidationError(BtxForgeError):
    """Jeu de données invalide."""

    exit_code = 1


# === Moteur tensoriel ===

class ShapeError(BtxForgeError, ValueError):
    """Formes incompatibles."""


class NonFiniteError(BtxForgeError, FloatingPointError):
    """Valeur NaN/Inf produite par une opération."""

    def __init__(self, op: str, tensor_id: int):
        self.op = op
        self.tensor_id = tensor_id
        super().__init__(f"non-finite value produced by {op} (tensor #{tensor_id})")


class EmptyLossSupportError(BtxForgeError, ValueError):
    """Aucune position non masquée dans la perte."""

    def __init__(self) -> None:
        super().__init__("empty loss support")


class TapeError(BtxForgeError, RuntimeError):
    """Mauvaise utilisation de la bande de gradient."""


# === Modèle ===

class ModelConfigError(BtxForgeError, ValueError):
    """Configuration d'architecture invalide."""


class ContextOverflowError(BtxForgeError, ValueError):
    """Séquence plus longue que le contexte maximal."""

    def __init__(self, length: int, max_context: int):
        self.length = length
        self.max_context = max_context
        super().__init__(f"context overflow: {length} tokens > max_context {max_context}")


class TokenRangeError(BtxForgeError, ValueError):
    """Identifiant de token hors vocabulaire."""


class CheckpointFormatError(BtxForgeError):
    """Fichier checkpoint illisible."""


# === Fusion ===

class CompatibilityError(BtxForgeError):
    """Sources de fusion incompatibles."""

    def __init__(self, mismatches: List[str]):
        self.mismatches = mismatches
        super().__init__("incompatible sources: " + "; ".join(mismatches))


class MergePlanError(BtxForgeError, ValueError):
    """Plan de fusion incohérent."""


class AdapterError(BtxForgeError, ValueError):
    """Adaptateur LoRA incohérent."""


# === Routage ===

class RoutingError(BtxForgeError, ValueError):
    """Paramètres de routage invalides."""


# === Données ===

class TemplateError(BtxForgeError, ValueError):
    """Gabarit d'instruction non rempli ou incompatible."""


class TransliterationTableError(BtxForgeError, ValueError):
    """Table de translittération invalide."""


class EmptyCandidateSetError(BtxForgeError, ValueError):
    """Aucun candidat après filtrage."""


# === Entraînement ===

class StageDataError(BtxForgeError, TypeError):
    """Type de données incompatible avec l'étape."""


class ScheduleError(BtxForgeError, ValueError):
    """Pas hors de [0, total_steps]."""


class DivergenceError(BtxForgeError):
    """Perte non finie pendant l'entraînement."""

    exit_code = 3

    def __init__(self, step: int, stage: Optional[str] = None):
        self.step = step
        self.stage = stage
        where = f" in stage {stage}" if stage else ""
        super().__init__(f"training diverged at step {step}{where}")


# === Évaluation / pipeline ===

class MetricInputError(BtxForgeError, ValueError):
    """Entrées de métrique invalides."""


class EmptyTraceError(BtxForgeError, ValueError):
    """Trace de routage vide."""


class MissingStageInputError(BtxForgeError):
    """Entrée d'étape absente."""

    def __init__(self, what: str):
        self.what = what
        super().__init__(f"missing stage input: {what}")
