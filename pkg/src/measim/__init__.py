"""Joint learning of a sequential measurement policy and a stochastic imputer.

Everything is trained from missing-only data: the imputer generates
pseudo-complete examples, the policy learns by REINFORCE against imputation
error on them, and the imputer keeps adapting to the missingness the policy
produces.
"""

__version__ = "0.1.0"
