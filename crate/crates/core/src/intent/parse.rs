use super::{ActionClass, Intent, IntentAction, LookupTable, Token, TokenKind};

/// Tokens inspected on each side of a device mention.
pub const WINDOW: usize = 4;

/// Index of the token closest to `center` within the window that satisfies
/// `pred`. At equal distance the left token wins.
fn nearest(tokens: &[Token], center: usize, pred: impl Fn(&TokenKind) -> bool) -> Option<usize> {
    (1..=WINDOW).find_map(|d| {
        let left = center.checked_sub(d).filter(|&j| pred(&tokens[j].kind));
        let right = Some(center + d).filter(|&j| j < tokens.len() && pred(&tokens[j].kind));
        left.or(right)
    })
}

fn window(tokens: &[Token], center: usize) -> impl Iterator<Item = &Token> {
    let lo = center.saturating_sub(WINDOW);
    let hi = (center + WINDOW).min(tokens.len() - 1);
    (lo..=hi).filter(move |&j| j != center).map(move |j| &tokens[j])
}

/// Keyword-window decision tree, one candidate intent per device mention.
///
/// For each device token:
/// 1. the nearest action keyword picks ON, OFF or SET;
/// 2. a negation anywhere in the window swaps ON and OFF (a negated SET is
///    dropped);
/// 3. OFF ignores levels; otherwise the nearest level turns the intent into
///    SET_LEVEL, clamped to the device range, and a SET with no level
///    degrades to ON;
/// 4. the nearest location keyword, if any, is attached;
/// 5. a mention with neither action nor level nearby is dropped.
pub fn parse_intent(tokens: &[Token], _table: &LookupTable) -> Vec<Intent> {
    let mut intents = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let TokenKind::Device(device) = tok.kind else { continue };

        let action = nearest(tokens, i, |k| matches!(k, TokenKind::Action(_))).map(|j| match tokens[j].kind {
            TokenKind::Action(a) => a,
            _ => unreachable!(),
        });
        let level = nearest(tokens, i, |k| matches!(k, TokenKind::Level(_))).map(|j| match tokens[j].kind {
            TokenKind::Level(l) => l,
            _ => unreachable!(),
        });
        if action.is_none() && level.is_none() {
            continue;
        }
        let negated = window(tokens, i).any(|t| t.kind == TokenKind::Negation);

        // A bare level ("light 70%") reads as a SET.
        let class = match (action.unwrap_or(ActionClass::Set), negated) {
            (ActionClass::On, true) => ActionClass::Off,
            (ActionClass::Off, true) => ActionClass::On,
            (ActionClass::Set, true) => continue,
            (a, false) => a,
        };
        let (action, level) = match (class, level) {
            (ActionClass::Off, _) => (IntentAction::Off, None),
            (_, Some(l)) => (IntentAction::SetLevel, Some(device.clamp(l))),
            (_, None) => (IntentAction::On, None),
        };
        let location = nearest(tokens, i, |k| *k == TokenKind::Location).map(|j| tokens[j].surface.clone());
        intents.push(Intent { device, action, level, location });
    }
    intents
}
