//! Symbolic heuristic representation.
//!
//! A dispatching rule is a rooted binary expression tree over six arithmetic
//! functions and ten shop-floor terminals. Trees are stored flat, as their
//! pre-order token sequence; because every function has arity exactly two the
//! flat form is a complete encoding and doubles as the wire format used by the
//! sequence models (bracketed by `START`/`END`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Priority values are clamped to this magnitude so that rule evaluation stays
/// total and totally ordered even when a rule divides by something tiny.
pub const PRIORITY_SENTINEL: f64 = 1e12;

/// Vocabulary size: 2 specials + 6 functions + 10 terminals.
pub const VOCAB_SIZE: usize = 18;

/// All tokens of the rule grammar, with their fixed wire ids.
///
/// The discriminants are the published id mapping: `START=0`, `END=1`, then
/// functions 2–7, then terminals 8–17. The mapping is stable; dataset and
/// model files depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Token {
    Start = 0,
    End = 1,
    Add = 2,
    Sub = 3,
    Mul = 4,
    Pdiv = 5,
    Max = 6,
    Min = 7,
    /// Number of operations in the queue.
    Niq = 8,
    /// Work (total processing time) in the queue.
    Wiq = 9,
    /// Waiting time of the machine since it last became idle.
    Mwt = 10,
    /// Processing time of the candidate operation on the candidate machine.
    Pt = 11,
    /// Median processing time of the job's next operation.
    Npt = 12,
    /// Waiting time of the operation.
    Owt = 13,
    /// Work remaining for the job, including the candidate operation.
    Wkr = 14,
    /// Number of operations remaining, including the candidate.
    Nor = 15,
    /// Due date minus current time minus work remaining.
    Slack = 16,
    /// Time in system: current time minus release time.
    Tis = 17,
}

/// The six binary functions, in id order.
pub const FUNCTIONS: [Token; 6] = [
    Token::Add,
    Token::Sub,
    Token::Mul,
    Token::Pdiv,
    Token::Max,
    Token::Min,
];

/// The ten terminals, in id order.
pub const TERMINALS: [Token; 10] = [
    Token::Niq,
    Token::Wiq,
    Token::Mwt,
    Token::Pt,
    Token::Npt,
    Token::Owt,
    Token::Wkr,
    Token::Nor,
    Token::Slack,
    Token::Tis,
];

impl Token {
    /// Wire id in `[0, 17]`.
    pub fn id(self) -> u16 {
        self as u16
    }

    /// Inverse of [`Token::id`].
    pub fn from_id(id: u16) -> Option<Token> {
        use Token::*;
        Some(match id {
            0 => Start,
            1 => End,
            2 => Add,
            3 => Sub,
            4 => Mul,
            5 => Pdiv,
            6 => Max,
            7 => Min,
            8 => Niq,
            9 => Wiq,
            10 => Mwt,
            11 => Pt,
            12 => Npt,
            13 => Owt,
            14 => Wkr,
            15 => Nor,
            16 => Slack,
            17 => Tis,
        _ => return None,
        })
    }

    pub fn is_function(self) -> bool {
        matches!(
            self,
            Token::Add | Token::Sub | Token::Mul | Token::Pdiv | Token::Max | Token::Min
        )
    }

    pub fn is_terminal(self) -> bool {
        self.id() >= 8
    }

    pub fn is_special(self) -> bool {
        matches!(self, Token::Start | Token::End)
    }

    /// Display name: operator symbol for functions, feature name for terminals.
    pub fn name(self) -> &'static str {
        use Token::*;
        match self {
            Start => "START",
            End => "END",
            Add => "+",
            Sub => "-",
            Mul => "*",
            Pdiv => "/",
            Max => "max",
            Min => "min",
            Niq => "NIQ",
            Wiq => "WIQ",
            Mwt => "MWT",
            Pt => "PT",
            Npt => "NPT",
            Owt => "OWT",
            Wkr => "WKR",
            Nor => "NOR",
            Slack => "SLACK",
            Tis => "TIS",
        }
    }

    /// Parse a display name back into a token.
    pub fn from_name(name: &str) -> Option<Token> {
        [Token::Start, Token::End]
            .iter()
            .chain(FUNCTIONS.iter())
            .chain(TERMINALS.iter())
            .copied()
            .find(|t| t.name() == name)
    }
}

/// Binary function application with protected division.
///
/// `PDIV(a, 0) = 1` for any `a`; results are clamped to
/// `±`[`PRIORITY_SENTINEL`] and NaN maps to the positive sentinel, so the
/// function is total over finite inputs.
pub fn apply_function(f: Token, a: f64, b: f64) -> f64 {
    let v = match f {
        Token::Add => a + b,
        Token::Sub => a - b,
        Token::Mul => a * b,
        Token::Pdiv => {
            if b == 0.0 {
                1.0
            } else {
                a / b
            }
        }
        Token::Max => a.max(b),
        Token::Min => a.min(b),
        _ => panic!("apply_function called with non-function token {f:?}"),
    };
    if v.is_nan() {
        PRIORITY_SENTINEL
    } else {
        v.clamp(-PRIORITY_SENTINEL, PRIORITY_SENTINEL)
    }
}

/// One real value per terminal, sampled from the shop state at a decision
/// point. All values are finite; `SLACK` may be negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub niq: f64,
    pub wiq: f64,
    pub mwt: f64,
    pub pt: f64,
    pub npt: f64,
    pub owt: f64,
    pub wkr: f64,
    pub nor: f64,
    pub slack: f64,
    pub tis: f64,
}

impl FeatureVector {
    pub fn terminal_value(&self, t: Token) -> f64 {
        match t {
            Token::Niq => self.niq,
            Token::Wiq => self.wiq,
            Token::Mwt => self.mwt,
            Token::Pt => self.pt,
            Token::Npt => self.npt,
            Token::Owt => self.owt,
            Token::Wkr => self.wkr,
            Token::Nor => self.nor,
            Token::Slack => self.slack,
            Token::Tis => self.tis,
            _ => panic!("terminal_value called with non-terminal token {t:?}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("malformed token sequence: {0}")]
    MalformedSequence(&'static str),
    #[error("node index {index} out of range for tree of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
}

/// A rooted binary expression tree stored as its pre-order token sequence
/// (functions and terminals only, no specials). Immutable after construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExprTree {
    nodes: Vec<Token>,
}

impl ExprTree {
    /// Builds a tree from a pre-order node sequence, validating the prefix
    /// counter invariant: scanning left to right with a counter starting at 1,
    /// functions add net +1, terminals −1, and the counter must reach 0
    /// exactly at the last token.
    pub fn from_nodes(nodes: Vec<Token>) -> Result<ExprTree, ExprError> {
        if nodes.is_empty() {
            return Err(ExprError::MalformedSequence("empty node sequence"));
        }
        let mut open: usize = 1;
        for (i, tok) in nodes.iter().enumerate() {
            if tok.is_special() {
                return Err(ExprError::MalformedSequence(
                    "special token inside expression body",
                ));
            }
            if tok.is_function() {
                open += 1;
            } else {
                open -= 1;
            }
            if open == 0 && i + 1 != nodes.len() {
                return Err(ExprError::MalformedSequence(
                    "expression complete before end of sequence",
                ));
            }
        }
        if open != 0 {
            return Err(ExprError::MalformedSequence("unfinished expression"));
        }
        Ok(ExprTree { nodes })
    }

    /// Single-terminal tree.
    pub fn leaf(t: Token) -> ExprTree {
        assert!(t.is_terminal());
        ExprTree { nodes: vec![t] }
    }

    pub fn nodes(&self) -> &[Token] {
        &self.nodes
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    /// Longest root-to-leaf path; a single node has depth 0.
    pub fn depth(&self) -> usize {
        self.node_depths().into_iter().max().unwrap_or(0)
    }

    /// Depth of every node, indexed by pre-order position (root = 0).
    pub fn node_depths(&self) -> Vec<usize> {
        let mut depths = Vec::with_capacity(self.nodes.len());
        // Stack of (remaining children, child depth) for open function nodes.
        let mut open: Vec<(u8, usize)> = vec![(1, 0)];
        for tok in &self.nodes {
            let top = open.last_mut().expect("valid tree cannot exhaust stack");
            top.0 -= 1;
            let d = top.1;
            depths.push(d);
            if tok.is_function() {
                open.push((2, d + 1));
            }
            while matches!(open.last(), Some((0, _))) {
                open.pop();
            }
        }
        depths
    }

    /// Evaluates the tree over a feature vector. Total and deterministic:
    /// protected division and sentinel clamping keep every result finite.
    pub fn evaluate(&self, f: &FeatureVector) -> f64 {
        let mut stack: Vec<f64> = Vec::with_capacity(1 + self.nodes.len() / 2);
        for tok in self.nodes.iter().rev() {
            if tok.is_terminal() {
                stack.push(f.terminal_value(*tok));
            } else {
                let a = stack.pop().expect("valid tree");
                let b = stack.pop().expect("valid tree");
                stack.push(apply_function(*tok, a, b));
            }
        }
        debug_assert_eq!(stack.len(), 1);
        stack[0]
    }

    /// `[START] + pre-order nodes + [END]`; length `size + 2`.
    pub fn to_prefix_tokens(&self) -> Vec<Token> {
        let mut seq = Vec::with_capacity(self.nodes.len() + 2);
        seq.push(Token::Start);
        seq.extend_from_slice(&self.nodes);
        seq.push(Token::End);
        seq
    }

    /// Exact inverse of [`ExprTree::to_prefix_tokens`].
    pub fn from_prefix_tokens(seq: &[Token]) -> Result<ExprTree, ExprError> {
        if seq.first() != Some(&Token::Start) {
            return Err(ExprError::MalformedSequence("sequence must begin with START"));
        }
        if seq.last() != Some(&Token::End) {
            return Err(ExprError::MalformedSequence("sequence must end with END"));
        }
        ExprTree::from_nodes(seq[1..seq.len() - 1].to_vec())
    }

    /// Same as [`ExprTree::from_prefix_tokens`] but over wire ids.
    pub fn from_prefix_ids(ids: &[u16]) -> Result<ExprTree, ExprError> {
        let toks: Vec<Token> = ids
            .iter()
            .map(|&i| Token::from_id(i).ok_or(ExprError::MalformedSequence("unknown token id")))
            .collect::<Result<_, _>>()?;
        ExprTree::from_prefix_tokens(&toks)
    }

    /// Pre-order span `[k, end)` of the subtree rooted at node `k`.
    pub fn subtree_span(&self, k: usize) -> Result<std::ops::Range<usize>, ExprError> {
        if k >= self.nodes.len() {
            return Err(ExprError::IndexOutOfRange {
                index: k,
                size: self.nodes.len(),
            });
        }
        let mut open = 1usize;
        let mut end = k;
        while open > 0 {
            if self.nodes[end].is_function() {
                open += 1;
            } else {
                open -= 1;
            }
            end += 1;
        }
        Ok(k..end)
    }

    /// The subtree rooted at pre-order index `k`.
    pub fn subtree_at(&self, k: usize) -> Result<ExprTree, ExprError> {
        let span = self.subtree_span(k)?;
        Ok(ExprTree {
            nodes: self.nodes[span].to_vec(),
        })
    }

    /// Every rooted subtree, in pre-order of its root.
    pub fn all_subtrees(&self) -> Vec<ExprTree> {
        (0..self.nodes.len())
            .map(|k| self.subtree_at(k).expect("index in range"))
            .collect()
    }

    /// Replaces the subtree rooted at `k` with `replacement`.
    pub fn replace_subtree(&self, k: usize, replacement: &ExprTree) -> Result<ExprTree, ExprError> {
        let span = self.subtree_span(k)?;
        let mut nodes = Vec::with_capacity(self.nodes.len() - span.len() + replacement.size());
        nodes.extend_from_slice(&self.nodes[..span.start]);
        nodes.extend_from_slice(&replacement.nodes);
        nodes.extend_from_slice(&self.nodes[span.end..]);
        Ok(ExprTree { nodes })
    }

    /// Functional rendering, e.g. `*(min(PT, WKR), NIQ)`.
    pub fn infix_string(&self) -> String {
        fn render(nodes: &[Token], pos: usize, out: &mut String) -> usize {
            let tok = nodes[pos];
            out.push_str(tok.name());
            if tok.is_terminal() {
                return pos + 1;
            }
            out.push('(');
            let next = render(nodes, pos + 1, out);
            out.push_str(", ");
            let next = render(nodes, next, out);
            out.push(')');
            next
        }
        let mut out = String::new();
        render(&self.nodes, 0, &mut out);
        out
    }

    /// Depth-capped rendering for report tables: subtrees deeper than `cap`
    /// collapse to `(...)`.
    pub fn infix_string_capped(&self, cap: usize) -> String {
        fn render(nodes: &[Token], pos: usize, depth: usize, cap: usize, out: &mut String) -> usize {
            let tok = nodes[pos];
            if tok.is_terminal() {
                out.push_str(tok.name());
                return pos + 1;
            }
            if depth >= cap {
                out.push_str(tok.name());
                out.push_str("(...)");
                // Skip the whole subtree.
                let mut open = 1usize;
                let mut end = pos;
                while open > 0 {
                    if nodes[end].is_function() {
                        open += 1;
                    } else {
                        open -= 1;
                    }
                    end += 1;
                }
                return end;
            }
            out.push_str(tok.name());
            out.push('(');
            let next = render(nodes, pos + 1, depth + 1, cap, out);
            out.push_str(", ");
            let next = render(nodes, next, depth + 1, cap, out);
            out.push(')');
            next
        }
        let mut out = String::new();
        render(&self.nodes, 0, 0, cap, &mut out);
        out
    }

    /// Canonical key for pattern grouping: token names joined by spaces in
    /// pre-order.
    pub fn prefix_key(&self) -> String {
        let mut parts = Vec::with_capacity(self.nodes.len());
        for t in &self.nodes {
            parts.push(t.name());
        }
        parts.join(" ")
    }
}

/// A heuristic is a pair of rule trees, the unit of evolution and evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Heuristic {
    pub sequencing: ExprTree,
    pub routing: ExprTree,
}

impl Heuristic {
    pub fn new(sequencing: ExprTree, routing: ExprTree) -> Heuristic {
        Heuristic {
            sequencing,
            routing,
        }
    }

    /// Total node count over both rules.
    pub fn size(&self) -> usize {
        self.sequencing.size() + self.routing.size()
    }

    /// JSON export: token-id arrays (including `START`/`END`) plus the
    /// rendered rule strings.
    pub fn to_json(&self) -> serde_json::Value {
        let ids = |t: &ExprTree| -> Vec<u16> { t.to_prefix_tokens().iter().map(|x| x.id()).collect() };
        serde_json::json!({
            "sequencing": ids(&self.sequencing),
            "routing": ids(&self.routing),
            "infix": {
                "sequencing": self.sequencing.infix_string(),
                "routing": self.routing.infix_string(),
            },
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Heuristic, ExprError> {
        let arr = |key: &str| -> Result<Vec<u16>, ExprError> {
            v.get(key)
                .and_then(|a| a.as_array())
                .ok_or(ExprError::MalformedSequence("missing token-id array"))?
                .iter()
                .map(|x| {
                    x.as_u64()
                        .and_then(|n| u16::try_from(n).ok())
                        .ok_or(ExprError::MalformedSequence("bad token id"))
                })
                .collect()
        };
        Ok(Heuristic {
            sequencing: ExprTree::from_prefix_ids(&arr("sequencing")?)?,
            routing: ExprTree::from_prefix_ids(&arr("routing")?)?,
        })
    }
}

/// Allowed-token set as an 18-bit mask over wire ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSet(u32);

impl TokenSet {
    pub fn empty() -> TokenSet {
        TokenSet(0)
    }

    pub fn insert(&mut self, t: Token) {
        self.0 |= 1 << t.id();
    }

    pub fn contains(&self, t: Token) -> bool {
        self.0 & (1 << t.id()) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Token> + '_ {
        (0..VOCAB_SIZE as u16).filter_map(Token::from_id).filter(|t| self.contains(*t))
    }
}

/// Incremental validity tracker for a partial prefix expression.
///
/// Each stack frame is an open function node with the number of children it
/// still awaits and the depth its children sit at; a virtual root frame awaits
/// the single root node. The stack is empty exactly when the expression is
/// complete.
#[derive(Clone, Debug)]
pub struct PrefixStack {
    frames: Vec<(u8, usize)>,
    max_depth: usize,
}

impl PrefixStack {
    /// Fresh stack for an empty prefix (one open slot: the root, at depth 0).
    pub fn new(max_depth: usize) -> PrefixStack {
        PrefixStack {
            frames: vec![(1, 0)],
            max_depth,
        }
    }

    /// Stack state after consuming the body of an existing tree up to (not
    /// including) pre-order index `k`.
    pub fn for_prefix_of(tree: &ExprTree, k: usize, max_depth: usize) -> Result<PrefixStack, ExprError> {
        if k > tree.size() {
            return Err(ExprError::IndexOutOfRange {
                index: k,
                size: tree.size(),
            });
        }
        let mut stack = PrefixStack::new(max_depth);
        for tok in &tree.nodes()[..k] {
            stack.consume(*tok)?;
        }
        Ok(stack)
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// True when the prefix forms a complete expression.
    pub fn is_complete(&self) -> bool {
        self.frames.is_empty()
    }

    /// Depth of the slot the next token would fill, if any.
    pub fn open_slot_depth(&self) -> Option<usize> {
        self.frames.last().map(|&(_, d)| d)
    }

    /// Number of open argument slots.
    pub fn open_slots(&self) -> usize {
        self.frames.iter().map(|&(r, _)| r as usize).sum()
    }

    /// Consumes one body token: a function fills the current slot and opens
    /// two more one level deeper; a terminal fills the slot and closes
    /// completed frames.
    pub fn consume(&mut self, tok: Token) -> Result<(), ExprError> {
        if tok.is_special() {
            return Err(ExprError::MalformedSequence(
                "special token inside expression body",
            ));
        }
        let top = self
            .frames
            .last_mut()
            .ok_or(ExprError::MalformedSequence("expression already complete"))?;
        top.0 -= 1;
        let d = top.1;
        if tok.is_function() {
            if d + 1 > self.max_depth {
                return Err(ExprError::MalformedSequence(
                    "function token would exceed maximum depth",
                ));
            }
            self.frames.push((2, d + 1));
        }
        while matches!(self.frames.last(), Some((0, _))) {
            self.frames.pop();
        }
        Ok(())
    }

    /// Tokens that may legally continue the prefix.
    ///
    /// With an open slot this is all functions and terminals, except at the
    /// depth cap where only terminals remain; with no open slot the expression
    /// is complete and only `END` is valid.
    pub fn valid_next_tokens(&self) -> TokenSet {
        let mut set = TokenSet::empty();
        match self.open_slot_depth() {
            None => set.insert(Token::End),
            Some(d) => {
                for t in TERMINALS {
                    set.insert(t);
                }
                if d < self.max_depth {
                    for t in FUNCTIONS {
                        set.insert(t);
                    }
                }
            }
        }
        set
    }
}

/// Tree construction method for random generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrowMethod {
    /// Leaves may appear at any depth up to the drawn depth.
    Grow,
    /// Every leaf sits at exactly the drawn depth.
    Full,
}

/// Generates a random tree. The target depth is drawn uniformly from
/// `[min_depth, max_depth]`; `Full` places terminals exactly at that depth,
/// `Grow` draws uniformly over the whole primitive set until the depth is
/// reached.
pub fn random_tree<R: Rng + ?Sized>(
    min_depth: usize,
    max_depth: usize,
    method: GrowMethod,
    rng: &mut R,
) -> ExprTree {
    assert!(min_depth <= max_depth);
    let target = rng.random_range(min_depth..=max_depth);
    let mut nodes = Vec::new();
    build_random(target, 0, method, rng, &mut nodes);
    ExprTree { nodes }
}

fn build_random<R: Rng + ?Sized>(
    target: usize,
    depth: usize,
    method: GrowMethod,
    rng: &mut R,
    out: &mut Vec<Token>,
) {
    let pick_terminal = if depth >= target {
        true
    } else {
        match method {
            GrowMethod::Full => false,
            // Uniform over the 16 primitives: 10/16 chance of a terminal.
            GrowMethod::Grow => rng.random_range(0..FUNCTIONS.len() + TERMINALS.len()) < TERMINALS.len(),
        }
    };
    if pick_terminal {
        out.push(TERMINALS[rng.random_range(0..TERMINALS.len())]);
    } else {
        out.push(FUNCTIONS[rng.random_range(0..FUNCTIONS.len())]);
        build_random(target, depth + 1, method, rng, out);
        build_random(target, depth + 1, method, rng, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(tokens: &[Token]) -> ExprTree {
        ExprTree::from_nodes(tokens.to_vec()).unwrap()
    }

    #[test]
    fn token_id_mapping_is_a_bijection() {
        for id in 0..VOCAB_SIZE as u16 {
            let t = Token::from_id(id).unwrap();
            assert_eq!(t.id(), id);
        }
        assert_eq!(Token::from_id(18), None);
        assert_eq!(FUNCTIONS.len() + TERMINALS.len() + 2, VOCAB_SIZE);
    }

    #[test]
    fn evaluate_basic_arithmetic() {
        let f = FeatureVector {
            tis: 5.0,
            pt: 3.0,
            ..Default::default()
        };
        let t = tree(&[Token::Sub, Token::Tis, Token::Pt]);
        assert_eq!(t.evaluate(&f), 2.0);
    }

    #[test]
    fn evaluate_protected_division_by_zero_is_one() {
        let f = FeatureVector {
            wiq: 7.0,
            niq: 0.0,
            ..Default::default()
        };
        let t = tree(&[Token::Pdiv, Token::Wiq, Token::Niq]);
        assert_eq!(t.evaluate(&f), 1.0);
        // PDIV(x, 0) == 1 for any numerator.
        for x in [-3.5, 0.0, 1e9] {
            assert_eq!(apply_function(Token::Pdiv, x, 0.0), 1.0);
        }
    }

    #[test]
    fn evaluate_max_of_pair() {
        let f = FeatureVector {
            slack: -4.0,
            mwt: 0.0,
            ..Default::default()
        };
        let t = tree(&[Token::Max, Token::Slack, Token::Mwt]);
        assert_eq!(t.evaluate(&f), 0.0);
    }

    #[test]
    fn evaluate_clamps_non_finite_intermediates() {
        let f = FeatureVector {
            wiq: 1e300,
            niq: 1e-300,
            pt: 1.0,
            ..Default::default()
        };
        // 1e300 / 1e-300 overflows; the sentinel keeps everything finite.
        let t = tree(&[Token::Add, Token::Pdiv, Token::Wiq, Token::Niq, Token::Pt]);
        let v = t.evaluate(&f);
        assert!(v.is_finite());
        assert_eq!(v, PRIORITY_SENTINEL);
    }

    #[test]
    fn prefix_tokens_round_trip_examples() {
        let t = tree(&[Token::Sub, Token::Tis, Token::Pt]);
        assert_eq!(
            t.to_prefix_tokens(),
            vec![Token::Start, Token::Sub, Token::Tis, Token::Pt, Token::End]
        );

        let leaf = ExprTree::leaf(Token::Pt);
        assert_eq!(
            leaf.to_prefix_tokens(),
            vec![Token::Start, Token::Pt, Token::End]
        );

        let t = tree(&[Token::Mul, Token::Min, Token::Pt, Token::Wkr, Token::Niq]);
        assert_eq!(
            t.to_prefix_tokens(),
            vec![
                Token::Start,
                Token::Mul,
                Token::Min,
                Token::Pt,
                Token::Wkr,
                Token::Niq,
                Token::End
            ]
        );
        assert_eq!(t.to_prefix_tokens().len(), t.size() + 2);
        assert_eq!(ExprTree::from_prefix_tokens(&t.to_prefix_tokens()).unwrap(), t);
    }

    #[test]
    fn from_prefix_rejects_malformed_sequences() {
        // Counter hits zero early.
        let early = [Token::Start, Token::Pt, Token::Pt, Token::End];
        assert!(matches!(
            ExprTree::from_prefix_tokens(&early),
            Err(ExprError::MalformedSequence(_))
        ));
        // Unfinished expression.
        let unfinished = [Token::Start, Token::Add, Token::Pt, Token::End];
        assert!(matches!(
            ExprTree::from_prefix_tokens(&unfinished),
            Err(ExprError::MalformedSequence(_))
        ));
        // Special token in the interior.
        let interior = [Token::Start, Token::Add, Token::Start, Token::Pt, Token::End];
        assert!(ExprTree::from_prefix_tokens(&interior).is_err());
        // Missing bracketing.
        assert!(ExprTree::from_prefix_tokens(&[Token::Pt]).is_err());
        assert!(ExprTree::from_prefix_tokens(&[Token::Start, Token::Pt]).is_err());
    }

    #[test]
    fn full_trees_are_complete_binary_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in 0..5 {
            let t = random_tree(d, d, GrowMethod::Full, &mut rng);
            assert_eq!(t.size(), (1 << (d + 1)) - 1);
            assert_eq!(t.depth(), d);
        }
    }

    #[test]
    fn grow_depth_zero_is_single_terminal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tree(0, 0, GrowMethod::Grow, &mut rng);
        assert_eq!(t.size(), 1);
        assert!(t.nodes()[0].is_terminal());
    }

    #[test]
    fn random_tree_is_deterministic_given_seed() {
        let a = random_tree(2, 6, GrowMethod::Grow, &mut ChaCha8Rng::seed_from_u64(42));
        let b = random_tree(2, 6, GrowMethod::Grow, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn grow_trees_respect_drawn_depth_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t = random_tree(2, 6, GrowMethod::Grow, &mut rng);
            assert!(t.depth() <= 6);
            assert!(t.size() >= 1);
        }
    }

    #[test]
    fn valid_next_tokens_examples() {
        let mut s = PrefixStack::new(8);
        // Empty prefix: the root slot is open, everything but END is valid.
        assert_eq!(s.valid_next_tokens().len(), 16);
        assert!(!s.valid_next_tokens().contains(Token::End));

        s.consume(Token::Add).unwrap();
        assert_eq!(s.valid_next_tokens().len(), 16);

        s.consume(Token::Pt).unwrap();
        s.consume(Token::Pt).unwrap();
        assert!(s.is_complete());
        let set = s.valid_next_tokens();
        assert_eq!(set.len(), 1);
        assert!(set.contains(Token::End));
    }

    #[test]
    fn valid_next_tokens_depth_cap_forces_terminals() {
        let mut s = PrefixStack::new(2);
        s.consume(Token::Add).unwrap();
        s.consume(Token::Mul).unwrap();
        // Open slot now sits at depth 2 == cap: functions are masked out.
        let set = s.valid_next_tokens();
        assert_eq!(set.len(), TERMINALS.len());
        for t in TERMINALS {
            assert!(set.contains(t));
        }
        for t in FUNCTIONS {
            assert!(!set.contains(t));
        }
    }

    // Exhaustive check over every reachable partial prefix shape of depth-3
    // trees: the valid set must contain exactly the tokens that keep the
    // prefix completable within the cap. The set depends only on the stack
    // shape, so one representative function and one terminal cover all
    // shapes without a combinatorial blowup over token identities.
    #[test]
    fn valid_next_tokens_exhaustive_depth_3() {
        fn explore(stack: &PrefixStack, prefix: &mut Vec<Token>, visited: &mut usize) {
            *visited += 1;
            let valid = stack.valid_next_tokens();
            if stack.is_complete() {
                assert_eq!(valid.len(), 1);
                assert!(valid.contains(Token::End));
                // The completed prefix must parse within the cap.
                let mut seq = vec![Token::Start];
                seq.extend_from_slice(prefix);
                seq.push(Token::End);
                let t = ExprTree::from_prefix_tokens(&seq).unwrap();
                assert!(t.depth() <= 3);
                return;
            }
            assert!(!valid.contains(Token::Start));
            assert!(!valid.contains(Token::End));
            let d = stack.open_slot_depth().unwrap();
            // Full-set membership: all terminals always; functions only
            // below the cap.
            for t in TERMINALS {
                assert!(valid.contains(t));
            }
            for t in FUNCTIONS {
                assert_eq!(valid.contains(t), d < stack.max_depth());
            }
            for t in [Token::Add, Token::Pt] {
                if valid.contains(t) {
                    let mut next = stack.clone();
                    next.consume(t).unwrap();
                    prefix.push(t);
                    explore(&next, prefix, visited);
                    prefix.pop();
                } else {
                    // The masked continuation must indeed be rejected.
                    let mut next = stack.clone();
                    assert!(next.consume(t).is_err());
                }
            }
        }
        let mut visited = 0usize;
        explore(&PrefixStack::new(3), &mut Vec::new(), &mut visited);
        // All partial prefixes over {function, terminal} shapes, depth <= 3.
        assert!(visited > 50, "visited only {visited} states");
    }

    #[test]
    fn subtree_at_preorder_index() {
        let t = tree(&[Token::Mul, Token::Min, Token::Pt, Token::Wkr, Token::Niq]);
        let sub = t.subtree_at(1).unwrap();
        assert_eq!(sub, tree(&[Token::Min, Token::Pt, Token::Wkr]));
        assert_eq!(t.subtree_at(4).unwrap(), ExprTree::leaf(Token::Niq));
        assert!(matches!(
            t.subtree_at(5),
            Err(ExprError::IndexOutOfRange { index: 5, size: 5 })
        ));
    }

    #[test]
    fn all_subtrees_of_three_node_tree() {
        let t = tree(&[Token::Sub, Token::Tis, Token::Pt]);
        assert_eq!(t.all_subtrees().len(), 3);
    }

    #[test]
    fn infix_rendering_matches_functional_notation() {
        let t = tree(&[Token::Sub, Token::Tis, Token::Pt]);
        assert_eq!(t.infix_string(), "-(TIS, PT)");
        let t = tree(&[Token::Mul, Token::Min, Token::Pt, Token::Wkr, Token::Niq]);
        assert_eq!(t.infix_string(), "*(min(PT, WKR), NIQ)");
    }

    #[test]
    fn replace_subtree_splices_spans() {
        let t = tree(&[Token::Mul, Token::Min, Token::Pt, Token::Wkr, Token::Niq]);
        let r = t.replace_subtree(1, &ExprTree::leaf(Token::Owt)).unwrap();
        assert_eq!(r, tree(&[Token::Mul, Token::Owt, Token::Niq]));
    }

    #[test]
    fn heuristic_json_round_trip() {
        let h = Heuristic::new(
            tree(&[Token::Sub, Token::Tis, Token::Pt]),
            tree(&[Token::Pdiv, Token::Wiq, Token::Niq]),
        );
        let v = h.to_json();
        assert_eq!(v["sequencing"], serde_json::json!([0, 3, 17, 11, 1]));
        assert_eq!(v["infix"]["sequencing"], "-(TIS, PT)");
        assert_eq!(Heuristic::from_json(&v).unwrap(), h);
    }

    #[test]
    fn node_depths_match_structure() {
        let t = tree(&[Token::Mul, Token::Min, Token::Pt, Token::Wkr, Token::Niq]);
        assert_eq!(t.node_depths(), vec![0, 1, 2, 2, 1]);
        assert_eq!(t.depth(), 2);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_tree() -> impl Strategy<Value = ExprTree> {
            (0u64..u64::MAX).prop_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                random_tree(0, 6, GrowMethod::Grow, &mut rng)
            })
        }

        proptest! {
            #[test]
            fn round_trip_identity(t in arb_tree()) {
                let seq = t.to_prefix_tokens();
                prop_assert_eq!(ExprTree::from_prefix_tokens(&seq).unwrap(), t);
            }

            #[test]
            fn subtree_count_equals_size(t in arb_tree()) {
                prop_assert_eq!(t.all_subtrees().len(), t.size());
            }

            #[test]
            fn evaluate_is_finite(t in arb_tree(), pt in 0.1f64..1e4, wiq in 0f64..1e6, slack in -1e5f64..1e5) {
                let f = FeatureVector { pt, wiq, slack, niq: 3.0, nor: 2.0, wkr: pt * 2.0, tis: 1.0, ..Default::default() };
                let v = t.evaluate(&f);
                prop_assert!(v.is_finite());
                prop_assert!(v.abs() <= PRIORITY_SENTINEL);
            }
        }
    }
}
