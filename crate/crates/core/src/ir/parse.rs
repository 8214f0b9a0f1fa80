use std::collections::{BTreeSet, HashSet};

use super::{
    AddressExpr, Extern, FenceKind, Function, FunctionKind, Instruction, Location, Op, Operand,
    Pos, Program, Register, Rvalue,
};
use crate::error::ParseError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(i64),
    Arrow,
    LArrow,
    Punct(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Num(n) => format!("`{n}`"),
            Tok::Arrow => "`->`".into(),
            Tok::LArrow => "`<-`".into(),
            Tok::Punct(c) => format!("`{c}`"),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '@' | '#' | '$')
}

pub(crate) fn is_register_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next() == Some('r') && chars.next().is_some_and(|c| c.is_ascii_digit())
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == ';' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_ident_start(c) {
            let start = i;
            while i < chars.len() && is_ident_char(chars[i]) {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
            continue;
        }
        let negative = c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || negative {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let n = text.parse().map_err(|_| ParseError::Syntax {
                line: lineno,
                col,
                expected: vec!["integer".into()],
                found: format!("`{text}`"),
            })?;
            out.push((Tok::Num(n), col));
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push((Tok::Arrow, col));
            i += 2;
            continue;
        }
        if c == '<' && chars.get(i + 1) == Some(&'-') {
            out.push((Tok::LArrow, col));
            i += 2;
            continue;
        }
        if "(),[]+*:&/".contains(c) {
            out.push((Tok::Punct(c), col));
            i += 1;
            continue;
        }
        return Err(ParseError::Syntax {
            line: lineno,
            col,
            expected: vec!["token".into()],
            found: format!("`{c}`"),
        });
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [(Tok, usize)],
    at: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.at)
            .map(|(_, c)| *c)
            .unwrap_or(self.eol_col)
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.peek();
        self.at += 1;
        t
    }

    fn err<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            line: self.line,
            col: self.col(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self
                .peek()
                .map(Tok::describe)
                .unwrap_or_else(|| "end of line".into()),
        })
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.at += 1;
            Ok(())
        } else {
            self.err(&[&format!("`{c}`")])
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.at += 1;
            Ok(())
        } else {
            self.err(&[what])
        }
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.peek().is_none() {
            Ok(())
        } else {
            self.err(&["end of line"])
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                self.at += 1;
                Ok(s.clone())
            }
            _ => self.err(&[what]),
        }
    }

    fn register(&mut self) -> Result<Register, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if is_register_name(s) => {
                self.at += 1;
                Ok(Register(s.clone()))
            }
            _ => self.err(&["register"]),
        }
    }

    fn location(&mut self) -> Result<Location, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !is_register_name(s) => {
                self.at += 1;
                Ok(Location(s.clone()))
            }
            _ => self.err(&["location"]),
        }
    }

    fn label_ref(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                self.at += 1;
                Ok(s.clone())
            }
            Some(Tok::Num(n)) => {
                self.at += 1;
                Ok(n.to_string())
            }
            _ => self.err(&["label"]),
        }
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if is_register_name(s) => {
                self.at += 1;
                Ok(Operand::Reg(Register(s.clone())))
            }
            Some(Tok::Num(n)) => {
                self.at += 1;
                Ok(Operand::Imm(*n))
            }
            Some(Tok::Punct('&')) => {
                self.at += 1;
                Ok(Operand::AddrOf(self.location()?))
            }
            _ => self.err(&["register", "integer", "`&location`"]),
        }
    }

    fn operand_list(&mut self) -> Result<Vec<Operand>, ParseError> {
        let mut out = vec![self.operand()?];
        while self.eat_punct(',') {
            out.push(self.operand()?);
        }
        Ok(out)
    }

    fn rvalue(&mut self) -> Result<Rvalue, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !is_register_name(s) => {
                self.at += 1;
                let args = if self.peek().is_some() {
                    self.operand_list()?
                } else {
                    Vec::new()
                };
                Ok(Rvalue {
                    op: Some(s.clone()),
                    args,
                })
            }
            _ => Ok(Rvalue::operand(self.operand()?)),
        }
    }

    fn address(&mut self) -> Result<AddressExpr, ParseError> {
        if self.eat_punct('[') {
            let r = self.register()?;
            self.expect_punct(']')?;
            return Ok(AddressExpr::Indirect(r));
        }
        let base = self.location()?;
        if !self.eat_punct('+') {
            return Ok(AddressExpr::Direct(base));
        }
        let mut index = vec![self.register()?];
        while matches!(self.peek(), Some(Tok::Punct('*')) | Some(Tok::Punct('+'))) {
            self.at += 1;
            index.push(self.register()?);
        }
        Ok(AddressExpr::Indexed { base, index })
    }
}

fn parse_op(cur: &mut Cursor) -> Result<Op, ParseError> {
    let col = cur.col();
    let head = match cur.peek() {
        Some(Tok::Ident(s)) => s.clone(),
        _ => return cur.err(&["instruction"]),
    };
    if is_register_name(&head) {
        let dst = cur.register()?;
        cur.expect(Tok::LArrow, "`<-`")?;
        let value = cur.rvalue()?;
        return Ok(Op::Alu { dst, value });
    }
    cur.at += 1;
    let op = match head.to_ascii_uppercase().as_str() {
        "R" => {
            let addr = cur.address()?;
            cur.expect(Tok::Arrow, "`->`")?;
            Op::Load {
                dst: cur.register()?,
                addr,
            }
        }
        "W" => {
            let addr = cur.address()?;
            cur.expect(Tok::LArrow, "`<-`")?;
            Op::Store {
                addr,
                src: cur.rvalue()?,
            }
        }
        "BEQZ" => {
            let cond = cur.register()?;
            cur.expect_punct(',')?;
            Op::BranchEqZero {
                cond,
                target: cur.label_ref()?,
            }
        }
        "JMP" => Op::Jump {
            target: cur.label_ref()?,
        },
        "LFENCE" => Op::Fence(FenceKind::LFence),
        "MFENCE" => Op::Fence(FenceKind::Full),
        "PROTECT" => Op::Protect(cur.register()?),
        "CALL" => {
            let func = cur.ident("function name")?;
            cur.expect_punct('(')?;
            let args = if cur.peek() == Some(&Tok::Punct(')')) {
                Vec::new()
            } else {
                cur.operand_list()?
            };
            cur.expect_punct(')')?;
            Op::Call { func, args }
        }
        "SKIP" => Op::Skip,
        _ => {
            return Err(ParseError::UnknownOpcode {
                line: cur.line,
                col,
                opcode: head,
            })
        }
    };
    Ok(op)
}

/// Parses and validates a litmus IR program.
pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut functions: Vec<Function> = Vec::new();
    let mut externs: Vec<Extern> = Vec::new();
    let mut aliases = Vec::new();
    let mut pending_label: Option<(String, usize)> = None;
    let mut header_lines: Vec<usize> = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        let toks = tokenize(raw, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let eol_col = raw.chars().count() + 1;
        let mut cur = Cursor {
            toks: &toks,
            at: 0,
            line: lineno,
            eol_col,
        };

        if let Some(Tok::Ident(kw)) = cur.peek() {
            match kw.as_str() {
                "alias" => {
                    cur.at += 1;
                    cur.expect_punct('(')?;
                    let a = cur.location()?;
                    cur.expect_punct(',')?;
                    let b = cur.location()?;
                    cur.expect_punct(')')?;
                    cur.end()?;
                    aliases.push((a, b));
                    continue;
                }
                "extern" => {
                    cur.at += 1;
                    let name = cur.ident("function name")?;
                    cur.expect_punct('/')?;
                    let arity = match cur.next() {
                        Some(Tok::Num(n)) if *n >= 0 => *n as usize,
                        _ => {
                            cur.at -= 1;
                            return cur.err(&["arity"]);
                        }
                    };
                    cur.end()?;
                    if externs.iter().any(|e| e.name == name) {
                        return Err(ParseError::Duplicate { line: lineno, name });
                    }
                    externs.push(Extern { name, arity });
                    continue;
                }
                "func" | "thread" => {
                    let kind = if kw == "func" {
                        FunctionKind::Function
                    } else {
                        FunctionKind::Thread
                    };
                    cur.at += 1;
                    let name = cur.ident("function name")?;
                    let mut params = Vec::new();
                    if kind == FunctionKind::Function && cur.eat_punct('(') && !cur.eat_punct(')') {
                        params.push(cur.register()?);
                        while cur.eat_punct(',') {
                            params.push(cur.register()?);
                        }
                        cur.expect_punct(')')?;
                    }
                    cur.expect_punct(':')?;
                    cur.end()?;
                    if let Some((l, line)) = pending_label.take() {
                        return Err(ParseError::Syntax {
                            line,
                            col: 1,
                            expected: vec!["instruction after label".into()],
                            found: format!("label `{l}` at end of function"),
                        });
                    }
                    if functions.iter().any(|f| f.name == name) {
                        return Err(ParseError::Duplicate { line: lineno, name });
                    }
                    functions.push(Function {
                        name,
                        kind,
                        params,
                        body: Vec::new(),
                    });
                    header_lines.push(lineno);
                    continue;
                }
                _ => {}
            }
        }

        // Optional label.
        let is_label = matches!(toks.get(1), Some((Tok::Punct(':'), _)))
            && matches!(
                toks.first(),
                Some((Tok::Ident(_), _)) | Some((Tok::Num(_), _))
            );
        let mut label = None;
        if is_label {
            let name = cur.label_ref()?;
            cur.at += 1;
            label = Some(name);
        }
        if cur.peek().is_none() {
            if let Some((l, line)) = pending_label.take() {
                return Err(ParseError::Syntax {
                    line,
                    col: 1,
                    expected: vec!["instruction after label".into()],
                    found: format!("label `{l}` followed by another label"),
                });
            }
            pending_label = label.map(|l| (l, lineno));
            continue;
        }
        let pos = Pos {
            line: lineno,
            col: cur.col(),
        };
        let op = parse_op(&mut cur)?;
        cur.end()?;
        let label = match (label, pending_label.take()) {
            (Some(l), None) | (None, Some((l, _))) => Some(l),
            (None, None) => None,
            (Some(_), Some((l, line))) => {
                return Err(ParseError::Syntax {
                    line,
                    col: 1,
                    expected: vec!["instruction after label".into()],
                    found: format!("label `{l}` followed by another label"),
                })
            }
        };
        if functions.is_empty() {
            functions.push(Function {
                name: "main".into(),
                kind: FunctionKind::Function,
                params: Vec::new(),
                body: Vec::new(),
            });
            header_lines.push(0);
        }
        functions
            .last_mut()
            .unwrap()
            .body
            .push(Instruction { label, op, pos });
    }
    if let Some((l, line)) = pending_label {
        return Err(ParseError::Syntax {
            line,
            col: 1,
            expected: vec!["instruction after label".into()],
            found: format!("label `{l}` at end of input"),
        });
    }
    if functions.is_empty() {
        return Err(ParseError::Empty);
    }
    let program = Program {
        functions,
        externs,
        aliases,
    };
    validate(&program, &header_lines)?;
    Ok(program)
}

fn validate(p: &Program, header_lines: &[usize]) -> Result<(), ParseError> {
    for (f, &hline) in p.functions.iter().zip(header_lines) {
        if p.extern_decl(&f.name).is_some() {
            return Err(ParseError::Duplicate {
                line: hline,
                name: f.name.clone(),
            });
        }
        let mut seen = HashSet::new();
        for i in &f.body {
            if let Some(l) = &i.label {
                if !seen.insert(l.clone()) {
                    return Err(ParseError::DuplicateLabel {
                        line: i.pos.line,
                        func: f.name.clone(),
                        label: l.clone(),
                    });
                }
            }
        }
        for i in &f.body {
            match &i.op {
                Op::BranchEqZero { target, .. } | Op::Jump { target } => {
                    if !seen.contains(target) {
                        return Err(ParseError::UndefinedLabel {
                            line: i.pos.line,
                            func: f.name.clone(),
                            label: target.clone(),
                        });
                    }
                }
                Op::Call { func, args } => {
                    if let Some(callee) = p.function(func) {
                        if callee.kind == FunctionKind::Thread {
                            return Err(ParseError::UnknownFunction {
                                line: i.pos.line,
                                func: func.clone(),
                            });
                        }
                        if callee.params.len() != args.len() {
                            return Err(ParseError::Arity {
                                line: i.pos.line,
                                func: func.clone(),
                                expected: callee.params.len(),
                                got: args.len(),
                            });
                        }
                        if args.iter().any(|a| !matches!(a, Operand::Reg(_))) {
                            return Err(ParseError::NonRegisterArgument {
                                line: i.pos.line,
                                func: func.clone(),
                            });
                        }
                    } else if let Some(e) = p.extern_decl(func) {
                        if e.arity != args.len() {
                            return Err(ParseError::Arity {
                                line: i.pos.line,
                                func: func.clone(),
                                expected: e.arity,
                                got: args.len(),
                            });
                        }
                    } else {
                        return Err(ParseError::UnknownFunction {
                            line: i.pos.line,
                            func: func.clone(),
                        });
                    }
                }
                _ => {}
            }
        }
        check_defined_before_use(f)?;
    }
    Ok(())
}

/// Forward must-analysis: a register is available at an instruction only if
/// every path from entry defines it.
fn check_defined_before_use(f: &Function) -> Result<(), ParseError> {
    let n = f.body.len();
    let mut universe: BTreeSet<&Register> = f.params.iter().collect();
    for i in &f.body {
        universe.extend(i.op.def());
        universe.extend(i.op.uses());
    }
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for i in 0..n {
        for s in f.successors(i) {
            preds[s].push(i);
        }
    }
    let entry: BTreeSet<&Register> = f.params.iter().collect();
    let mut avail_in: Vec<BTreeSet<&Register>> = vec![universe.clone(); n];
    if n > 0 {
        avail_in[0] = entry.clone();
    }
    fn out<'a>(
        f: &'a Function,
        i: usize,
        avail_in: &[BTreeSet<&'a Register>],
    ) -> BTreeSet<&'a Register> {
        let mut s = avail_in[i].clone();
        if let Some(d) = f.body[i].op.def() {
            s.insert(d);
        }
        s
    }
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            let mut acc: Option<BTreeSet<&Register>> =
                if i == 0 { Some(entry.clone()) } else { None };
            for &p in &preds[i] {
                let o = out(f, p, &avail_in);
                acc = Some(match acc {
                    None => o,
                    Some(a) => a.intersection(&o).copied().collect(),
                });
            }
            let new = acc.unwrap_or_else(|| universe.clone());
            if new != avail_in[i] {
                avail_in[i] = new;
                changed = true;
            }
        }
    }
    for (i, inst) in f.body.iter().enumerate() {
        for u in inst.op.uses() {
            if !avail_in[i].contains(u) {
                return Err(ParseError::UseBeforeDef {
                    line: inst.pos.line,
                    reg: u.0.clone(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOUNDS_CHECK: &str = "\
R size -> r1
R y -> r2
r3 <- lt r2, r1
BEQZ r3, 8
R A+r2 -> r4
R B+r4 -> r5
W tmp <- r5
8: skip
";

    #[test]
    fn parses_bounds_check_listing() {
        let p = parse(BOUNDS_CHECK).unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].body.len(), 8);
        let locs: Vec<_> = p.locations().into_iter().map(|l| l.0).collect();
        assert_eq!(locs, ["A", "B", "size", "tmp", "y"]);
        assert_eq!(p.functions[0].successors(3), vec![4, 7]);
    }

    #[test]
    fn skip_only_body() {
        let p = parse("func main:\n  skip\n").unwrap();
        assert_eq!(p.functions[0].body, vec![Instruction::new(Op::Skip)]);
    }

    #[test]
    fn use_before_def_is_reported() {
        let err = parse("R [r0] -> r1\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::UseBeforeDef {
                line: 1,
                reg: "r0".into()
            }
        );
    }

    #[test]
    fn use_before_def_on_one_path_only() {
        let src = "R x -> r1\nBEQZ r1, L\nr2 <- 1\nL: R A+r2 -> r3\n";
        assert!(matches!(
            parse(src),
            Err(ParseError::UseBeforeDef { line: 4, .. })
        ));
    }

    #[test]
    fn undefined_label() {
        let err = parse("R x -> r1\nBEQZ r1, nowhere\n").unwrap_err();
        assert!(matches!(err, ParseError::UndefinedLabel { line: 2, .. }));
    }

    #[test]
    fn unknown_opcode() {
        let err = parse("FROB x\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownOpcode {
                line: 1,
                col: 1,
                opcode: "FROB".into()
            }
        );
    }

    #[test]
    fn syntax_error_position() {
        let err = parse("R x r1\n").unwrap_err();
        match err {
            ParseError::Syntax {
                line,
                col,
                expected,
                ..
            } => {
                assert_eq!((line, col), (1, 5));
                assert_eq!(expected, vec!["`->`".to_string()]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn address_modes() {
        let p = parse("R x -> r1\nR A+r1 -> r2\nR [r2] -> r3\nR A+r1*r2 -> r4\n").unwrap();
        let addrs: Vec<_> = p.functions[0]
            .body
            .iter()
            .map(|i| match &i.op {
                Op::Load { addr, .. } => addr.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert!(matches!(addrs[0], AddressExpr::Direct(_)));
        assert!(matches!(addrs[1], AddressExpr::Indexed { .. }));
        assert!(matches!(addrs[2], AddressExpr::Indirect(_)));
        assert!(matches!(&addrs[3], AddressExpr::Indexed { index, .. } if index.len() == 2));
    }

    #[test]
    fn declarations_and_threads() {
        let src = "alias (X, Y)\nextern memcmp/2\nthread t0:\n W x <- 1\nthread t1:\n R x -> r1\n";
        let p = parse(src).unwrap();
        assert_eq!(p.aliases.len(), 1);
        assert_eq!(p.externs[0].arity, 2);
        assert_eq!(p.entries().len(), 2);
        assert!(p.is_multi_threaded());
    }

    #[test]
    fn call_validation() {
        assert!(matches!(
            parse("CALL nothere()\n"),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(matches!(
            parse("extern f/2\nCALL f(&a)\n"),
            Err(ParseError::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
        assert!(parse("extern f/2\nfunc main:\nCALL f(&a, &b)\n").is_ok());
    }

    #[test]
    fn pretty_print_round_trip() {
        let p = parse(BOUNDS_CHECK).unwrap();
        let text = p.to_string();
        let q = parse(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(text, q.to_string());
    }
}
