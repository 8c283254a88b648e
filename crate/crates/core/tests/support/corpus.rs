//! Fixed snippets for the security gate.

use cellagent::security::RuleKind;

/// Each must be rejected by the default policy with an import violation.
pub const BANNED_IMPORTS: [&str; 10] = [
    "import os",
    "import subprocess",
    "from os import path",
    "import os.path",
    "from subprocess import run",
    "import os as o",
    "import sys, os",
    "def f():\n    import os\n    return os.getcwd()",
    "try:\n    import subprocess\nexcept ImportError:\n    pass",
    "from os.path import join",
];

/// Each must be rejected by the default policy; the kind expected first.
pub const BANNED_CALLS_AND_ATTRS: [(&str, RuleKind); 10] = [
    ("eval('1+1')", RuleKind::FunctionRule),
    ("exec('x = 1')", RuleKind::FunctionRule),
    ("m = __import__('os')", RuleKind::FunctionRule),
    ("import builtins\nbuiltins.eval('2')", RuleKind::FunctionRule),
    ("print(eval('3'))", RuleKind::FunctionRule),
    ("fs = [exec(s) for s in ['a = 1']]", RuleKind::FunctionRule),
    ("g = lambda: eval('4')", RuleKind::FunctionRule),
    ("x = object()\nx.__builtins__", RuleKind::AttributeRule),
    ("b = __builtins__", RuleKind::AttributeRule),
    ("def f(y):\n    return y.__builtins__['eval']", RuleKind::AttributeRule),
];

/// Each must pass the default policy untouched.
pub const CLEAN: [&str; 10] = [
    "a = 1 + 2",
    "import math\nr = math.sqrt(16)",
    "import pandas as pd\ndf = pd.DataFrame({'a': [1, 2], 'b': [3, 4]})\nt = df.eval('a + b')",
    "balance = 1000\nbalance = balance - 200\nprint(balance)",
    "items = [x * x for x in range(10) if x % 2]",
    "def evaluate(x):\n    return x + 1\nz = evaluate(2)",
    "import json\ns = json.dumps({'k': [1, 2]})",
    "class Account:\n    def __init__(self):\n        self.osname = 'x'\nacct = Account()",
    "from collections import Counter\nc = Counter('hello')",
    "text = 'import os; eval(1)'\nn = len(text)",
];
