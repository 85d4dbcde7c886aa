"""Exception taxonomy shared by the CLI exit-code contract.

ValidationError -> exit 1 (bad inputs, malformed files, shape mismatches).
NumericError    -> exit 2 (non-finite values, failed numeric checks).
"""


class ValidationError(Exception):
    pass


class NumericError(Exception):
    pass
