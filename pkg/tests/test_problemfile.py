import numpy as np
import pytest

from envsens import problemfile
from envsens.calcvar import VariationalProblem
from envsens.errors import ProblemFileError
from envsens.static_opt import ParameterizedNLP

STATIC = """
[problem]
kind = static
n = 1
m = 1

[objective]
f = "-(x1 - 2)^2"

[constraints]
g1 = "x1 - pi1"
"""

VARIATIONAL = """
[problem]
kind = variational
n = 1
m = 1

[objective]
L = "-v1^2"

[constraints]
h1 = "x1 - pi1"

[variational]
T = 1
a0 = [0]
aT = 0
N = 50
"""


class TestLoads:
    def test_static(self):
        pf = problemfile.loads(STATIC, name="ineq")
        assert isinstance(pf.problem, ParameterizedNLP)
        assert pf.summary() == "static, n=1, m=1, k=1, l=0"
        assert pf.name == "ineq" and pf.unused == ()

    def test_variational(self):
        pf = problemfile.loads(VARIATIONAL)
        assert isinstance(pf.problem, VariationalProblem)
        assert pf.N == 50
        np.testing.assert_array_equal(pf.problem.aT, [0.0])

    def test_missing_T(self):
        with pytest.raises(ProblemFileError, match="missing field T"):
            problemfile.loads(VARIATIONAL.replace("T = 1\n", ""))

    def test_parse_error_offset(self):
        with pytest.raises(ProblemFileError, match="offset 4"):
            problemfile.loads(STATIC.replace('"-(x1 - 2)^2"', '"x1 +"'))

    def test_unused_variable(self):
        pf = problemfile.loads(STATIC.replace("n = 1", "n = 2"))
        assert pf.unused == ("x2",)

    def test_undeclared_variable(self):
        with pytest.raises(ProblemFileError, match="x3"):
            problemfile.loads(STATIC.replace('"x1 - pi1"', '"x3 - pi1"'))

    def test_gap_in_constraint_indices(self):
        with pytest.raises(ProblemFileError, match="without gaps"):
            problemfile.loads(STATIC.replace("g1 =", "g2 ="))

    def test_declared_counts_checked(self):
        with pytest.raises(ProblemFileError, match="declared k"):
            problemfile.loads(STATIC.replace("m = 1", "m = 1\nk = 2"))

    def test_options(self):
        pf = problemfile.loads(STATIC + "\n[options]\ntol_stat = 1e-6\nmax_iter = 7\n")
        assert pf.options.tol_stat == 1e-6 and pf.options.max_iter == 7
        with pytest.raises(ProblemFileError, match="unknown option"):
            problemfile.loads(STATIC + "\n[options]\nbogus = 1\n")

    def test_box(self):
        pf = problemfile.loads(STATIC.replace("m = 1", "m = 1\nbox_lower = [-1]\nbox_upper = [5]"))
        np.testing.assert_array_equal(pf.problem.box[0], [-1.0])

    def test_wrong_vector_length(self):
        with pytest.raises(ProblemFileError, match="a0"):
            problemfile.loads(VARIATIONAL.replace("a0 = [0]", "a0 = [0, 1]"))

    def test_kind_section_exclusive(self):
        with pytest.raises(ProblemFileError):
            problemfile.loads(STATIC + "\n[variational]\nT = 1\n")

    def test_bad_kind(self):
        with pytest.raises(ProblemFileError, match="kind"):
            problemfile.loads(STATIC.replace("static", "dynamic"))

    def test_malformed(self):
        with pytest.raises(ProblemFileError):
            problemfile.loads("no section header")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProblemFileError):
            problemfile.load(tmp_path / "absent.ini")


class TestRoundTrip:
    @pytest.mark.parametrize("text", [STATIC, VARIATIONAL])
    def test_dumps_loads(self, text):
        pf = problemfile.loads(text)
        again = problemfile.loads(problemfile.dumps(pf.problem, pf.N))
        assert list(again.problem.labelled()) == list(pf.problem.labelled())
        assert again.summary() == pf.summary()

    def test_catalogue_files(self, problems_dir):
        for path in sorted(problems_dir.glob("*.ini")):
            pf = problemfile.load(path)
            assert pf.name == path.stem
