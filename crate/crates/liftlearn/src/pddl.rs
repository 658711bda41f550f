//! Parser for the PDDL subset `:strips :typing :negative-preconditions :equality`.
//!
//! Equality is materialized as an ordinary binary predicate `eq` whose
//! reflexive atoms `eq(o,o)` are added to every initial state, so downstream
//! consumers only ever see plain atoms.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::{ActionSchema, Atom, GroundState, Instance, LiftedAtom, LiftedDomain, PredicateSig};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unsupported feature at {line}:{col}: {msg}")]
    Unsupported { line: usize, col: usize, msg: String },
    #[error("undeclared {kind} `{name}` at {line}:{col}")]
    Undeclared { kind: &'static str, name: String, line: usize, col: usize },
    #[error("type mismatch for object `{0}`")]
    TypeMismatch(String),
}

#[derive(Debug, Clone)]
enum Sexp {
    Atom(String, usize, usize),
    List(Vec<Sexp>, usize, usize),
}

impl Sexp {
    fn pos(&self) -> (usize, usize) {
        match self {
            Sexp::Atom(_, l, c) | Sexp::List(_, l, c) => (*l, *c),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(String, usize, usize)>, ParseError> {
    let mut tokens = Vec::new();
    let mut line = 1usize;
    let mut col = 0usize;
    let mut cur = String::new();
    let mut cur_pos = (0, 0);
    let mut in_comment = false;
    for ch in text.chars() {
        col += 1;
        if ch == '\n' {
            line += 1;
            col = 0;
            in_comment = false;
        }
        if in_comment {
            continue;
        }
        match ch {
            ';' => {
                if !cur.is_empty() {
                    tokens.push((std::mem::take(&mut cur), cur_pos.0, cur_pos.1));
                }
                in_comment = true;
            }
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push((std::mem::take(&mut cur), cur_pos.0, cur_pos.1));
                }
                tokens.push((ch.to_string(), line, col));
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push((std::mem::take(&mut cur), cur_pos.0, cur_pos.1));
                }
            }
            c => {
                if cur.is_empty() {
                    cur_pos = (line, col);
                }
                cur.push(c.to_ascii_lowercase());
            }
        }
    }
    if !cur.is_empty() {
        tokens.push((cur, cur_pos.0, cur_pos.1));
    }
    Ok(tokens)
}

fn parse_sexp(tokens: &[(String, usize, usize)], pos: &mut usize) -> Result<Sexp, ParseError> {
    if *pos >= tokens.len() {
        return Err(ParseError::Syntax { line: 0, col: 0, msg: "unexpected end of input".into() });
    }
    let (tok, line, col) = tokens[*pos].clone();
    *pos += 1;
    if tok == "(" {
        let mut items = Vec::new();
        loop {
            if *pos >= tokens.len() {
                return Err(ParseError::Syntax { line, col, msg: "unclosed parenthesis".into() });
            }
            if tokens[*pos].0 == ")" {
                *pos += 1;
                return Ok(Sexp::List(items, line, col));
            }
            items.push(parse_sexp(tokens, pos)?);
        }
    } else if tok == ")" {
        Err(ParseError::Syntax { line, col, msg: "unexpected `)`".into() })
    } else {
        Ok(Sexp::Atom(tok, line, col))
    }
}

fn read_toplevel(text: &str) -> Result<Sexp, ParseError> {
    let tokens = tokenize(text)?;
    let mut pos = 0;
    let sexp = parse_sexp(&tokens, &mut pos)?;
    if pos != tokens.len() {
        let (_, l, c) = tokens[pos];
        return Err(ParseError::Syntax { line: l, col: c, msg: "trailing content".into() });
    }
    Ok(sexp)
}

fn as_atom(s: &Sexp) -> Result<(&str, usize, usize), ParseError> {
    match s {
        Sexp::Atom(a, l, c) => Ok((a, *l, *c)),
        Sexp::List(_, l, c) => {
            Err(ParseError::Syntax { line: *l, col: *c, msg: "expected a symbol".into() })
        }
    }
}

const SUPPORTED_REQUIREMENTS: &[&str] =
    &[":strips", ":typing", ":negative-preconditions", ":equality"];

/// Parse a typed symbol list `a b - t c d - t2 e` into (symbol, type) pairs.
fn parse_typed_list(items: &[Sexp]) -> Result<Vec<(String, Option<String>)>, ParseError> {
    let mut out: Vec<(String, Option<String>)> = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let (tok, l, c) = as_atom(&items[i])?;
        if tok == "-" {
            i += 1;
            if i >= items.len() {
                return Err(ParseError::Syntax { line: l, col: c, msg: "missing type after `-`".into() });
            }
            let (ty, _, _) = as_atom(&items[i])?;
            for name in pending.drain(..) {
                out.push((name, Some(ty.to_string())));
            }
        } else {
            pending.push(tok.to_string());
        }
        i += 1;
    }
    for name in pending {
        out.push((name, None));
    }
    Ok(out)
}

struct AtomParseCtx<'a> {
    predicates: &'a [PredicateSig],
    params: &'a [String],
}

fn parse_lifted_atom(ctx: &AtomParseCtx, items: &[Sexp], l: usize, c: usize) -> Result<LiftedAtom, ParseError> {
    if items.is_empty() {
        return Err(ParseError::Syntax { line: l, col: c, msg: "empty atom".into() });
    }
    let (head, hl, hc) = as_atom(&items[0])?;
    let name = if head == "=" { "eq" } else { head };
    let predicate = ctx
        .predicates
        .iter()
        .position(|p| p.name == name)
        .ok_or_else(|| ParseError::Undeclared { kind: "predicate", name: name.into(), line: hl, col: hc })?;
    let arity = ctx.predicates[predicate].arity;
    if items.len() - 1 != arity {
        return Err(ParseError::Syntax {
            line: hl,
            col: hc,
            msg: format!("predicate {name} expects {arity} arguments, got {}", items.len() - 1),
        });
    }
    let mut args = Vec::new();
    for item in &items[1..] {
        let (v, vl, vc) = as_atom(item)?;
        let idx = ctx
            .params
            .iter()
            .position(|p| p == v)
            .ok_or_else(|| ParseError::Undeclared { kind: "variable", name: v.into(), line: vl, col: vc })?;
        args.push(idx);
    }
    Ok(LiftedAtom { predicate, args })
}

/// Collect the conjuncts of `(and ...)`, a bare atom, or `()`.
fn conjuncts(s: &Sexp) -> Result<Vec<&Sexp>, ParseError> {
    match s {
        Sexp::List(items, _, _) if !items.is_empty() => {
            if let Sexp::Atom(head, _, _) = &items[0] {
                if head == "and" {
                    return Ok(items[1..].iter().collect());
                }
            }
            Ok(vec![s])
        }
        Sexp::List(_, _, _) => Ok(vec![]),
        Sexp::Atom(_, l, c) => {
            Err(ParseError::Syntax { line: *l, col: *c, msg: "expected a condition".into() })
        }
    }
}

/// Parse a PDDL domain into a [`LiftedDomain`].
///
/// Predicates of arity 0 or ≥ 3 are rejected, as are conditional effects and
/// numeric fluents. An `eq` predicate is appended when `:equality` is required
/// (or `=` is used) and not already declared.
pub fn parse_domain(text: &str) -> Result<LiftedDomain, ParseError> {
    let top = read_toplevel(text)?;
    let Sexp::List(items, tl, tc) = &top else {
        let (l, c) = top.pos();
        return Err(ParseError::Syntax { line: l, col: c, msg: "expected `(define ...)`".into() });
    };
    if items.is_empty() || as_atom(&items[0])?.0 != "define" {
        return Err(ParseError::Syntax { line: *tl, col: *tc, msg: "expected `(define ...)`".into() });
    }

    let mut name = String::new();
    let mut predicates: Vec<PredicateSig> = Vec::new();
    let mut types: Vec<String> = Vec::new();
    let mut actions: Vec<&Vec<Sexp>> = Vec::new();
    let mut uses_equality = false;

    for item in &items[1..] {
        let Sexp::List(section, sl, sc) = item else {
            let (l, c) = item.pos();
            return Err(ParseError::Syntax { line: l, col: c, msg: "expected a section list".into() });
        };
        if section.is_empty() {
            continue;
        }
        let (head, _, _) = as_atom(&section[0])?;
        match head {
            "domain" => {
                name = as_atom(&section[1])?.0.to_string();
            }
            ":requirements" => {
                for req in &section[1..] {
                    let (r, rl, rc) = as_atom(req)?;
                    if !SUPPORTED_REQUIREMENTS.contains(&r) {
                        return Err(ParseError::Unsupported {
                            line: rl,
                            col: rc,
                            msg: format!("requirement {r}"),
                        });
                    }
                    if r == ":equality" {
                        uses_equality = true;
                    }
                }
            }
            ":types" => {
                let typed = parse_typed_list(&section[1..])?;
                for (t, parent) in typed {
                    if parent.is_some() {
                        return Err(ParseError::Unsupported {
                            line: *sl,
                            col: *sc,
                            msg: "type hierarchies".into(),
                        });
                    }
                    types.push(t);
                }
            }
            ":predicates" => {
                for pred in &section[1..] {
                    let Sexp::List(p, pl, pc) = pred else {
                        let (l, c) = pred.pos();
                        return Err(ParseError::Syntax {
                            line: l,
                            col: c,
                            msg: "expected predicate declaration".into(),
                        });
                    };
                    let (pname, _, _) = as_atom(&p[0])?;
                    let args = parse_typed_list(&p[1..])?;
                    if args.is_empty() || args.len() > 2 {
                        return Err(ParseError::Unsupported {
                            line: *pl,
                            col: *pc,
                            msg: format!("predicate {pname} of arity {}", args.len()),
                        });
                    }
                    if predicates.iter().any(|q| q.name == pname) {
                        return Err(ParseError::Syntax {
                            line: *pl,
                            col: *pc,
                            msg: format!("duplicate predicate {pname}"),
                        });
                    }
                    predicates.push(PredicateSig { name: pname.to_string(), arity: args.len() });
                }
            }
            ":action" => actions.push(section),
            ":functions" => {
                return Err(ParseError::Unsupported {
                    line: *sl,
                    col: *sc,
                    msg: "numeric fluents".into(),
                })
            }
            ":constants" => {
                return Err(ParseError::Unsupported {
                    line: *sl,
                    col: *sc,
                    msg: "domain constants".into(),
                })
            }
            other => {
                return Err(ParseError::Unsupported {
                    line: *sl,
                    col: *sc,
                    msg: format!("section {other}"),
                })
            }
        }
    }

    if uses_equality && !predicates.iter().any(|p| p.name == "eq") {
        predicates.push(PredicateSig { name: "eq".into(), arity: 2 });
    }

    let mut schemas = Vec::new();
    for section in actions {
        schemas.push(parse_action(section, &predicates, &types)?);
    }

    Ok(LiftedDomain { name, predicates, types, schemas })
}

fn parse_action(
    section: &[Sexp],
    predicates: &[PredicateSig],
    types: &[String],
) -> Result<ActionSchema, ParseError> {
    let (name, nl, nc) = as_atom(&section[1])?;
    let mut params: Vec<String> = Vec::new();
    let mut param_types: Vec<Option<usize>> = Vec::new();
    let mut schema = ActionSchema::new(name, 0);

    let mut i = 2;
    while i < section.len() {
        let (key, kl, kc) = as_atom(&section[i])?;
        let value = section.get(i + 1).ok_or_else(|| ParseError::Syntax {
            line: kl,
            col: kc,
            msg: format!("missing value after {key}"),
        })?;
        match key {
            ":parameters" => {
                let Sexp::List(list, _, _) = value else {
                    let (l, c) = value.pos();
                    return Err(ParseError::Syntax { line: l, col: c, msg: "expected parameter list".into() });
                };
                for (p, ty) in parse_typed_list(list)? {
                    if !p.starts_with('?') {
                        return Err(ParseError::Syntax {
                            line: kl,
                            col: kc,
                            msg: format!("parameter {p} must start with `?`"),
                        });
                    }
                    let ti = match ty {
                        None => None,
                        Some(t) => Some(types.iter().position(|x| *x == t).ok_or(
                            ParseError::Undeclared { kind: "type", name: t.clone(), line: kl, col: kc },
                        )?),
                    };
                    params.push(p);
                    param_types.push(ti);
                }
            }
            ":precondition" => {
                let ctx = AtomParseCtx { predicates, params: &params };
                for cond in conjuncts(value)? {
                    let Sexp::List(items, cl, cc) = cond else {
                        let (l, c) = cond.pos();
                        return Err(ParseError::Syntax { line: l, col: c, msg: "expected atom".into() });
                    };
                    let (head, _, _) = as_atom(&items[0])?;
                    if head == "not" {
                        let Some(Sexp::List(inner, il, ic)) = items.get(1) else {
                            return Err(ParseError::Syntax {
                                line: *cl,
                                col: *cc,
                                msg: "expected atom inside not".into(),
                            });
                        };
                        schema.pre_neg.insert(parse_lifted_atom(&ctx, inner, *il, *ic)?);
                    } else {
                        schema.pre_pos.insert(parse_lifted_atom(&ctx, items, *cl, *cc)?);
                    }
                }
            }
            ":effect" => {
                let ctx = AtomParseCtx { predicates, params: &params };
                for eff in conjuncts(value)? {
                    let Sexp::List(items, el, ec) = eff else {
                        let (l, c) = eff.pos();
                        return Err(ParseError::Syntax { line: l, col: c, msg: "expected effect atom".into() });
                    };
                    let (head, _, _) = as_atom(&items[0])?;
                    match head {
                        "when" | "forall" => {
                            return Err(ParseError::Unsupported {
                                line: *el,
                                col: *ec,
                                msg: "conditional effects".into(),
                            })
                        }
                        "increase" | "decrease" | "assign" => {
                            return Err(ParseError::Unsupported {
                                line: *el,
                                col: *ec,
                                msg: "numeric fluents".into(),
                            })
                        }
                        "not" => {
                            let Some(Sexp::List(inner, il, ic)) = items.get(1) else {
                                return Err(ParseError::Syntax {
                                    line: *el,
                                    col: *ec,
                                    msg: "expected atom inside not".into(),
                                });
                            };
                            schema.del.insert(parse_lifted_atom(&ctx, inner, *il, *ic)?);
                        }
                        _ => {
                            schema.add.insert(parse_lifted_atom(&ctx, items, *el, *ec)?);
                        }
                    }
                }
            }
            other => {
                return Err(ParseError::Unsupported {
                    line: kl,
                    col: kc,
                    msg: format!("action field {other}"),
                })
            }
        }
        i += 2;
    }

    // atoms added and deleted in the same action cancel: reject as malformed
    if schema.add.intersection(&schema.del).next().is_some() {
        return Err(ParseError::Syntax {
            line: nl,
            col: nc,
            msg: format!("action {name} adds and deletes the same atom"),
        });
    }

    schema.arity = params.len();
    schema.param_types = param_types;
    Ok(schema)
}

/// Parse a PDDL problem against an already-parsed domain. Objects keep their
/// declaration order; `eq(o,o)` atoms are materialized when the domain has an
/// `eq` predicate.
pub fn parse_problem(text: &str, domain: &LiftedDomain) -> Result<Instance, ParseError> {
    let top = read_toplevel(text)?;
    let Sexp::List(items, tl, tc) = &top else {
        let (l, c) = top.pos();
        return Err(ParseError::Syntax { line: l, col: c, msg: "expected `(define ...)`".into() });
    };
    if items.is_empty() || as_atom(&items[0])?.0 != "define" {
        return Err(ParseError::Syntax { line: *tl, col: *tc, msg: "expected `(define ...)`".into() });
    }

    let mut objects: Vec<(String, Option<String>)> = Vec::new();
    let mut init: BTreeSet<Atom> = BTreeSet::new();
    let mut goal: BTreeSet<Atom> = BTreeSet::new();

    let ground = |objects: &[(String, Option<String>)], items: &[Sexp]| -> Result<Atom, ParseError> {
        let (head, hl, hc) = as_atom(&items[0])?;
        let name = if head == "=" { "eq" } else { head };
        let r = domain.predicate_index(name).ok_or_else(|| ParseError::Undeclared {
            kind: "predicate",
            name: name.into(),
            line: hl,
            col: hc,
        })?;
        let arity = domain.predicates[r].arity;
        if items.len() - 1 != arity {
            return Err(ParseError::Syntax {
                line: hl,
                col: hc,
                msg: format!("predicate {name} expects {arity} arguments"),
            });
        }
        let mut idx = [0usize; 2];
        for (k, item) in items[1..].iter().enumerate() {
            let (o, ol, oc) = as_atom(item)?;
            idx[k] = objects.iter().position(|(n, _)| n == o).ok_or_else(|| ParseError::Undeclared {
                kind: "object",
                name: o.into(),
                line: ol,
                col: oc,
            })?;
        }
        Ok(if arity == 1 { (r, idx[0], idx[0]) } else { (r, idx[0], idx[1]) })
    };

    for item in &items[1..] {
        let Sexp::List(section, sl, sc) = item else {
            let (l, c) = item.pos();
            return Err(ParseError::Syntax { line: l, col: c, msg: "expected a section list".into() });
        };
        if section.is_empty() {
            continue;
        }
        let (head, _, _) = as_atom(&section[0])?;
        match head {
            "problem" | ":domain" => {}
            ":objects" => {
                for (o, ty) in parse_typed_list(&section[1..])? {
                    if let Some(t) = &ty {
                        if !domain.types.contains(t) {
                            return Err(ParseError::TypeMismatch(o));
                        }
                    }
                    objects.push((o, ty));
                }
            }
            ":init" => {
                for atom in &section[1..] {
                    let Sexp::List(a, _, _) = atom else {
                        let (l, c) = atom.pos();
                        return Err(ParseError::Syntax { line: l, col: c, msg: "expected init atom".into() });
                    };
                    init.insert(ground(&objects, a)?);
                }
            }
            ":goal" => {
                let Some(cond) = section.get(1) else { continue };
                for conj in conjuncts(cond)? {
                    let Sexp::List(a, _, _) = conj else {
                        let (l, c) = conj.pos();
                        return Err(ParseError::Syntax { line: l, col: c, msg: "expected goal atom".into() });
                    };
                    goal.insert(ground(&objects, a)?);
                }
            }
            other => {
                return Err(ParseError::Unsupported {
                    line: *sl,
                    col: *sc,
                    msg: format!("section {other}"),
                })
            }
        }
    }

    if let Some(eq) = domain.predicate_index("eq") {
        for i in 0..objects.len() {
            init.insert((eq, i, i));
        }
    }

    Ok(Instance { objects, init: GroundState { atoms: init }, goal })
}

/// Map instance objects to domain type indices, `None` for untyped objects.
pub fn object_type_indices(instance: &Instance, domain: &LiftedDomain) -> Vec<Option<usize>> {
    instance
        .objects
        .iter()
        .map(|(_, ty)| ty.as_ref().and_then(|t| domain.types.iter().position(|x| x == t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    #[test]
    fn blocks3_domain_shapes() {
        let domain = parse_domain(preset("blocks3").unwrap().domain_text).unwrap();
        let sigs: Vec<String> =
            domain.schemas.iter().map(|s| format!("{}/{}", s.name, s.arity)).collect();
        assert_eq!(sigs, ["stack/2", "newtower/2", "move/3"]);
        let preds: Vec<String> = domain.predicates.iter().map(|p| p.to_string()).collect();
        assert_eq!(preds, ["clear/1", "on-table/1", "on/2", "eq/2"]);
    }

    #[test]
    fn gripper_domain_shapes() {
        let domain = parse_domain(preset("gripper").unwrap().domain_text).unwrap();
        assert_eq!(domain.schemas.len(), 3);
        assert_eq!(domain.predicates.len(), 8);
        assert!(domain.predicates.iter().any(|p| p.name == "eq" && p.arity == 2));
    }

    #[test]
    fn empty_action_body() {
        let domain = parse_domain(
            "(define (domain d) (:requirements :strips)
               (:predicates (p ?x))
               (:action noop :parameters (?x) :precondition (and) :effect (and)))",
        )
        .unwrap();
        let s = &domain.schemas[0];
        assert!(s.pre_pos.is_empty() && s.pre_neg.is_empty() && s.add.is_empty() && s.del.is_empty());
    }

    #[test]
    fn problem_object_counts() {
        let p = preset("blocks3").unwrap();
        let domain = parse_domain(p.domain_text).unwrap();
        assert_eq!(parse_problem(p.train_text, &domain).unwrap().objects.len(), 5);
        let v = preset("visitall").unwrap();
        let vd = parse_domain(v.domain_text).unwrap();
        assert_eq!(parse_problem(v.train_text, &vd).unwrap().objects.len(), 25);
    }

    #[test]
    fn empty_init_has_no_atoms_without_equality() {
        let domain = parse_domain(
            "(define (domain d) (:requirements :strips)
               (:predicates (p ?x))
               (:action a :parameters (?x) :precondition (p ?x) :effect (and)))",
        )
        .unwrap();
        let inst = parse_problem(
            "(define (problem e) (:domain d) (:objects o1 o2) (:init) (:goal (and)))",
            &domain,
        )
        .unwrap();
        assert!(inst.init.is_empty());
    }

    #[test]
    fn equality_is_materialized_reflexively() {
        let p = preset("blocks3").unwrap();
        let domain = parse_domain(p.domain_text).unwrap();
        let inst = parse_problem(p.train_text, &domain).unwrap();
        let eq = domain.predicate_index("eq").unwrap();
        for i in 0..inst.objects.len() {
            assert!(inst.init.contains(&(eq, i, i)));
        }
    }

    #[test]
    fn rejects_unsupported_requirements_and_arity() {
        assert!(parse_domain("(define (domain d) (:requirements :adl))").is_err());
        assert!(parse_domain(
            "(define (domain d) (:requirements :strips) (:predicates (p ?x ?y ?z)))"
        )
        .is_err());
    }
}
