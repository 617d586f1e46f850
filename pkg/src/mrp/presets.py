"""Factor definitions and model formulas for the 2016 presidential models."""

from .frame import FactorSpec

STATES = (
    "AK", "AL", "AR", "AZ", "CA", "CO", "CT", "DE", "FL", "GA",
    "HI", "IA", "ID", "IL", "IN", "KS", "KY", "LA", "MA", "MD",
    "ME", "MI", "MN", "MO", "MS", "MT", "NC", "ND", "NE", "NH",
    "NJ", "NM", "NV", "NY", "OH", "OK", "OR", "PA", "RI", "SC",
    "SD", "TN", "TX", "UT", "VA", "VT", "WA", "WI", "WV", "WY",
)

ELECTION_FACTORS = (
    FactorSpec("state", STATES),
    FactorSpec("eth", ("Black", "Hispanic", "Other", "White")),
    FactorSpec("gender", ("Female", "Male")),
    FactorSpec("marstat", ("Never married", "Married", "Not married")),
    FactorSpec("age", ("18-29", "30-44", "45-64", "65-98")),
    FactorSpec(
        "educ",
        ("No High School", "High School", "Some College", "College", "Post Graduate"),
    ),
)

_VARYING = """
      (1 | state) + (1 | age) +
      (1 | educ) + (1 + state_pres_vote | eth) +
      (1 | marstat) + (1 | marstat:age) +
      (1 | marstat:state) + (1 | marstat:eth) +
      (1 | marstat:gender) + (1 | marstat:educ) +
      (1 | state:gender) + (1 | age:gender) +
      (1 | educ:gender) + (1 | eth:gender) +
      (1 | state:eth) + (1 | state:age) +
      (1 | state:educ) + (1 | eth:age) +
      (1 | eth:educ) + (1 | age:educ) +
      (1 | state:educ:age) + (1 | educ:age:gender)"""

TURNOUT_FORMULA = "cbind(vote, did_not_vote) ~ 1 + female + state_pres_vote +" + _VARYING
PREFERENCE_FORMULA = "cbind(clinton, trump) ~ 1 + female + state_pres_vote +" + _VARYING

# female is coded +0.5 / -0.5; state_pres_vote is a per-state poll average
# in [0, 1], centred at 0.5 when covariate centring is on.
FEMALE_COVARIATE = {"factor": "gender", "values": {"Female": 0.5, "Male": -0.5}}
STATE_PRES_VOTE_CENTER = 0.5


def state_pres_vote_covariate(values) -> dict:
    """Covariate config for a per-state poll average, centred at 0.5."""
    return {"factor": "state", "values": dict(values), "center": STATE_PRES_VOTE_CENTER}
