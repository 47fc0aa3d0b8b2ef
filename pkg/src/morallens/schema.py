"""Shared vocabularies: behaviour modalities and the demographic attribute schema."""

from __future__ import annotations

import enum
from typing import Final

from .errors import UnknownModality


class Modality(str, enum.Enum):
    DESKTOP_WEB = "desktop"
    MOBILE_WEB = "mobile-web"
    MOBILE_APP = "mobile-apps"

    @property
    def is_web(self) -> bool:
        return self is not Modality.MOBILE_APP

    @property
    def prefix(self) -> str:
        """Qualifier used in vocabulary keys, e.g. ``web:google.com``."""
        return "web" if self.is_web else "app"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "desktop": cls.DESKTOP_WEB,
            "desktop-web": cls.DESKTOP_WEB,
            "desktopweb": cls.DESKTOP_WEB,
            "mobile-web": cls.MOBILE_WEB,
            "mobileweb": cls.MOBILE_WEB,
            "mobile-apps": cls.MOBILE_APP,
            "mobile-app": cls.MOBILE_APP,
            "mobileapp": cls.MOBILE_APP,
            "apps": cls.MOBILE_APP,
        }
        try:
            return aliases[key]
        except KeyError:
            raise UnknownModality(f"unknown modality {value!r}") from None


# Feature views evaluated per target, in report column order. The fused view
# concatenates mobile web and app vectors of the same users.
VIEWS: Final[dict[str, tuple[Modality, ...]]] = {
    "desktop": (Modality.DESKTOP_WEB,),
    "mobile-web": (Modality.MOBILE_WEB,),
    "mobile-apps": (Modality.MOBILE_APP,),
    "fused": (Modality.MOBILE_WEB, Modality.MOBILE_APP),
}

# Demographic attributes with their label sets and the cohort counts reported
# for the 7,633-person study sample (used as default synthetic marginals).
DEMOGRAPHICS: Final[dict[str, dict[str, int]]] = {
    "age": {
        "18-24": 262, "25-34": 1308, "35-49": 2009,
        "50-54": 879, "55-64": 1759, "65Plus": 1416,
    },
    "education": {
        "College Graduate": 2624, "Post Graduate": 2211, "Some College": 1680,
        "High-school": 619, "Trade School": 479,
    },
    "ethnicity": {"Asian": 338, "African American": 485, "White": 6359, "Hispanic": 347},
    "exercise": {"No": 3328, "Yes": 4305},
    "gender": {"Female": 4367, "Male": 3266},
    "income": {
        "20KLess": 342, "20K-30K": 492, "30K-50K": 1222, "50K-75K": 1613,
        "75K-100K": 1520, "100K-150K": 1581, "150K-200K": 515, "200KPlus": 348,
    },
    "marital_status": {"Divorced": 733, "Single": 1281, "Married": 4690, "Living Together": 617},
    "parent": {"No": 2533, "Yes": 5100},
    "political_party": {"Democrat": 2973, "Republican": 2556, "Libertarian": 215, "Independent": 1889},
    "smoker": {"No": 7027, "Yes": 606},
    "wealth": {
        "50KLess": 2246, "50K-100K": 915, "100K-250K": 1213,
        "250K-500K": 1303, "500K-1000K": 1067, "1000KPlus": 889,
    },
    "weight_issues": {"No": 4239, "Yes": 3394},
}

DEMOGRAPHIC_LABELS: Final[dict[str, tuple[str, ...]]] = {
    name: tuple(counts) for name, counts in DEMOGRAPHICS.items()
}

DEM_REP_TARGET: Final[str] = "political_party_dem_rep"
DEM_REP_LABELS: Final[tuple[str, str]] = ("Democrat", "Republican")


def default_marginals(attribute: str) -> dict[str, float]:
    counts = DEMOGRAPHICS[attribute]
    total = sum(counts.values())
    return {label: n / total for label, n in counts.items()}
